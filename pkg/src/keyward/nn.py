"""Small numpy network core: layer stacks, reverse-mode gradients, SGD.

All trainable parameters of a :class:`Net` live in one flat float64 buffer
(``net.params``); each layer holds reshaped views into it. This makes the
parameter-server protocol a matter of slicing one vector. Frozen
``fixed_dense`` weights are stored outside that buffer.

Inputs are batched row-major, shape ``(batch, dim)``. A 1-D input is treated
as a batch of one and the output is squeezed back.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DegenerateInputError, ParameterError, ShapeError

KINDS = ("dense", "leaky_relu", "tanh", "l2_normalize", "fixed_dense", "layer_norm")

# norms below this are treated as the zero vector by l2_normalize
L2_EPS = 1e-12
LN_EPS = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    slope: float = 0.2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ShapeError(f"{self.kind}: dims must be positive, got {self.in_dim}->{self.out_dim}")
        if self.kind not in ("dense", "fixed_dense") and self.in_dim != self.out_dim:
            raise ShapeError(f"{self.kind} must preserve width, got {self.in_dim}->{self.out_dim}")

    @property
    def trainable(self) -> bool:
        return self.kind in ("dense", "layer_norm")

    @property
    def n_params(self) -> int:
        if self.kind == "dense":
            return self.out_dim * self.in_dim + self.out_dim
        if self.kind == "layer_norm":
            return 2 * self.out_dim
        return 0


def dense(i, o):
    return LayerSpec("dense", i, o)


def fixed_dense(i, o):
    return LayerSpec("fixed_dense", i, o)


def leaky_relu(d, slope=0.2):
    return LayerSpec("leaky_relu", d, d, slope)


def tanh(d):
    return LayerSpec("tanh", d, d)


def layer_norm(d):
    return LayerSpec("layer_norm", d, d)


def l2_normalize(d):
    return LayerSpec("l2_normalize", d, d)


# ---------------------------------------------------------------------------
# layers


class _Layer:
    n_params = 0

    def __init__(self, spec: LayerSpec):
        self.spec = spec

    def bind(self, view: np.ndarray) -> None:
        pass

    def init(self, rng: np.random.Generator) -> None:
        pass

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, gy):
        """Return (grad_x, grad_params or None)."""
        raise NotImplementedError


class _Dense(_Layer):
    def __init__(self, spec):
        super().__init__(spec)
        self.n_params = spec.n_params

    def bind(self, view):
        o, i = self.spec.out_dim, self.spec.in_dim
        self.W = view[: o * i].reshape(o, i)
        self.b = view[o * i :]

    def init(self, rng):
        self.W[...] = rng.standard_normal(self.W.shape) / np.sqrt(self.spec.in_dim)
        self.b[...] = 0.0

    def forward(self, x):
        return x @ self.W.T + self.b, x

    def backward(self, x, gy):
        gW = gy.T @ x
        gb = gy.sum(axis=0)
        return gy @ self.W, np.concatenate([gW.ravel(), gb])


class _FixedDense(_Layer):
    """Random projection, drawn once at init and never trained."""

    def init(self, rng):
        o, i = self.spec.out_dim, self.spec.in_dim
        self.W = rng.standard_normal((o, i)) / np.sqrt(i)
        self.W.setflags(write=False)

    def forward(self, x):
        return x @ self.W.T, None

    def backward(self, cache, gy):
        return gy @ self.W, None


class _LeakyReLU(_Layer):
    def forward(self, x):
        # valid for slope <= 1
        return np.maximum(x, self.spec.slope * x), x

    def backward(self, x, gy):
        slope = self.spec.slope
        return gy * ((x >= 0) * (1.0 - slope) + slope), None


class _Tanh(_Layer):
    def forward(self, x):
        y = np.tanh(x)
        return y, y

    def backward(self, y, gy):
        return gy * (1.0 - y * y), None


class _L2Normalize(_Layer):
    def forward(self, x):
        norm = np.sqrt(np.einsum("ij,ij->i", x, x))[:, None]
        if np.any(norm < L2_EPS):
            raise DegenerateInputError("l2_normalize received a zero vector")
        y = x / norm
        return y, (y, norm)

    def backward(self, cache, gy):
        # Jacobian (I - y y^T) / |x|
        y, norm = cache
        proj = np.einsum("ij,ij->i", y, gy)[:, None]
        return (gy - y * proj) / norm, None


class _LayerNorm(_Layer):
    def __init__(self, spec):
        super().__init__(spec)
        self.n_params = spec.n_params

    def bind(self, view):
        d = self.spec.out_dim
        self.gain = view[:d]
        self.bias = view[d:]

    def init(self, rng):
        self.gain[...] = 1.0
        self.bias[...] = 0.0

    def forward(self, x):
        xc = x - x.mean(axis=1, keepdims=True)
        sigma = np.sqrt(np.einsum("ij,ij->i", xc, xc)[:, None] / x.shape[1] + LN_EPS)
        xhat = xc / sigma
        return self.gain * xhat + self.bias, (xhat, sigma)

    def backward(self, cache, gy):
        xhat, sigma = cache
        d = xhat.shape[1]
        g_gain = np.einsum("ij,ij->j", gy, xhat)
        g_bias = gy.sum(axis=0)
        gxhat = gy * self.gain
        gx = gxhat - gxhat.mean(axis=1, keepdims=True)
        gx -= xhat * (np.einsum("ij,ij->i", gxhat, xhat)[:, None] / d)
        gx /= sigma
        return gx, np.concatenate([g_gain, g_bias])


_LAYER_CLASSES = {
    "dense": _Dense,
    "fixed_dense": _FixedDense,
    "leaky_relu": _LeakyReLU,
    "tanh": _Tanh,
    "l2_normalize": _L2Normalize,
    "layer_norm": _LayerNorm,
}


# ---------------------------------------------------------------------------
# network


@dataclass
class Tape:
    net_id: int
    version: int
    caches: list
    squeeze: bool


class Net:
    """A layer stack whose trainable parameters share one flat buffer."""

    def __init__(self, specs: list[LayerSpec]):
        if not specs:
            raise ShapeError("a network needs at least one layer")
        for a, b in zip(specs, specs[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"{a.kind}({a.out_dim}) does not feed {b.kind}({b.in_dim})")
        self.specs = list(specs)
        self.layers = [_LAYER_CLASSES[s.kind](s) for s in self.specs]
        self.index_map: list[tuple[int, int, int]] = []
        offset = 0
        for i, layer in enumerate(self.layers):
            if layer.n_params:
                self.index_map.append((i, offset, layer.n_params))
                offset += layer.n_params
        self.params = np.zeros(offset)
        for i, off, n in self.index_map:
            self.layers[i].bind(self.params[off : off + n])
        self.version = 0

    @property
    def in_dim(self) -> int:
        return self.specs[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.specs[-1].out_dim

    @property
    def n_params(self) -> int:
        return self.params.size

    def set_params(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != self.params.shape:
            raise ShapeError(f"expected {self.params.size} parameters, got {vec.shape}")
        np.copyto(self.params, vec)
        self.version += 1

    def get_params(self) -> np.ndarray:
        return self.params.copy()

    def frozen_digest(self) -> str:
        h = hashlib.sha256()
        for layer in self.layers:
            if isinstance(layer, _FixedDense):
                h.update(np.ascontiguousarray(layer.W).tobytes())
        return h.hexdigest()

    def params_digest(self) -> str:
        return hashlib.sha256(self.params.tobytes()).hexdigest()

    def architecture(self) -> tuple:
        return tuple(self.specs)

    def share_frozen_from(self, other: "Net") -> None:
        """Point this net's fixed layers at ``other``'s (same architecture required)."""
        if self.architecture() != other.architecture():
            raise ShapeError("architectures differ")
        for mine, theirs in zip(self.layers, other.layers):
            if isinstance(mine, _FixedDense):
                mine.W = theirs.W

    def copy(self) -> "Net":
        new = Net(self.specs)
        new.share_frozen_from(self)
        new.set_params(self.params)
        return new

    def __call__(self, x):
        return forward(self, x)[0]


def init_net(specs: list[LayerSpec], seed: int) -> Net:
    net = Net(specs)
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        layer.init(rng)
    return net


def forward(net: Net, x) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"input width {x.shape[-1]} != {net.in_dim}")
    caches = []
    for layer in net.layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    return (x[0] if squeeze else x), Tape(id(net), net.version, caches, squeeze)


def backward(net: Net, tape: Tape, grad_y) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. the flat trainable parameters and the input.

    Parameter gradients are summed over the batch.
    """
    if tape.net_id != id(net) or tape.version != net.version:
        raise ContractError("tape does not belong to the current state of this network")
    g = np.asarray(grad_y, dtype=np.float64)
    if tape.squeeze:
        g = g[None, :]
    if g.ndim != 2 or g.shape[1] != net.out_dim:
        raise ShapeError(f"grad_y width {g.shape[-1]} != {net.out_dim}")
    grads = np.zeros_like(net.params)
    offsets = {i: (off, n) for i, off, n in net.index_map}
    for i in range(len(net.layers) - 1, -1, -1):
        g, gp = net.layers[i].backward(tape.caches[i], g)
        if gp is not None:
            off, n = offsets[i]
            grads[off : off + n] = gp
    return grads, (g[0] if tape.squeeze else g)


def sgd_step(params: np.ndarray, grads: np.ndarray, lr: float, weight_decay: float = 0.0) -> np.ndarray:
    """One SGD update; ``weight_decay`` is the coefficient of ``|p|^2`` in the objective."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ShapeError(f"params {params.shape} vs grads {grads.shape}")
    if not lr > 0:
        raise ParameterError(f"lr must be positive, got {lr}")
    if weight_decay < 0:
        raise ParameterError(f"weight_decay must be non-negative, got {weight_decay}")
    if weight_decay == 0:
        return params - lr * grads
    return params - lr * (grads + 2.0 * weight_decay * params)


def step(net: Net, grads: np.ndarray, lr: float, weight_decay: float = 0.0) -> None:
    net.set_params(sgd_step(net.params, grads, lr, weight_decay))


# ---------------------------------------------------------------------------
# checkpoint format: little-endian u64 length, then that many little-endian f32


def save_params(path, vec: np.ndarray) -> None:
    vec = np.asarray(vec)
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", vec.size))
        f.write(vec.astype("<f4").tobytes())


def load_params(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ShapeError("truncated .params header")
    (n,) = struct.unpack_from("<Q", data)
    if len(data) != 8 + 4 * n:
        raise ShapeError(f".params payload has {len(data) - 8} bytes, header says {4 * n}")
    return np.frombuffer(data, dtype="<f4", offset=8).astype(np.float64)
