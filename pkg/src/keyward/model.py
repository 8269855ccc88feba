"""Key-protected classifier, the cross-entropy baseline, and their losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import KeyAccessError, ParameterError, ShapeError
from .keys import ClassKey


@dataclass
class KeyProtectedClassifier:
    net: nn.Net
    d_emb: int

    @property
    def d_key(self) -> int:
        return self.net.out_dim

    def embed(self, x):
        return nn.forward(self.net, x)[0]

    def copy(self) -> "KeyProtectedClassifier":
        return KeyProtectedClassifier(self.net.copy(), self.d_emb)


@dataclass
class VanillaClassifier:
    net: nn.Net
    classes: list

    def logits(self, x):
        return nn.forward(self.net, x)[0]

    def class_index(self, labels) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.classes)}
        try:
            return np.array([lookup[c] for c in labels], dtype=int)
        except KeyError as e:
            raise ParameterError(f"label {e.args[0]!r} is not a declared class") from None

    def copy(self) -> "VanillaClassifier":
        return VanillaClassifier(self.net.copy(), list(self.classes))


def body_specs(in_dim: int, hidden=(64, 64), d_emb: int = 64, slope: float = 0.2) -> list:
    specs, prev = [], in_dim
    for h in hidden:
        specs += [nn.dense(prev, h), nn.leaky_relu(h, slope)]
        prev = h
    specs.append(nn.dense(prev, d_emb))
    return specs


def key_protected_specs(in_dim, hidden=(64, 64), d_emb=64, d_key=None, fixed_layer=False,
                        fixed_activation="leaky_relu", use_layer_norm=True, head_activation=None,
                        slope=0.2) -> list:
    """body -> [fixed_dense -> act -> layer_norm] -> l2_normalize.

    Without a fixed layer the key width equals ``d_emb`` and ``head_activation``
    (``None``, ``"tanh"`` or ``"leaky_relu"``) may be applied before the
    normalization.
    """
    specs = body_specs(in_dim, hidden, d_emb, slope)
    if fixed_layer:
        d_key = d_key or d_emb
        specs.append(nn.fixed_dense(d_emb, d_key))
        specs.append(_activation(fixed_activation, d_key, slope))
        if use_layer_norm:
            specs.append(nn.layer_norm(d_key))
    else:
        if d_key is not None and d_key != d_emb:
            raise ShapeError(f"without a fixed layer d_key must equal d_emb ({d_emb}), got {d_key}")
        d_key = d_emb
        if head_activation is not None:
            specs.append(_activation(head_activation, d_key, slope))
    specs.append(nn.l2_normalize(d_key))
    return specs


def _activation(name, d, slope):
    if name == "tanh":
        return nn.tanh(d)
    if name == "leaky_relu":
        return nn.leaky_relu(d, slope)
    raise ParameterError(f"unknown activation {name!r}")


def build_key_protected(in_dim, seed, **kw) -> KeyProtectedClassifier:
    specs = key_protected_specs(in_dim, **kw)
    return KeyProtectedClassifier(nn.init_net(specs, seed), kw.get("d_emb", 64))


def build_vanilla(in_dim, classes, seed, hidden=(64, 64), d_emb=64, slope=0.2) -> VanillaClassifier:
    specs = body_specs(in_dim, hidden, d_emb, slope)
    specs += [nn.leaky_relu(d_emb, slope), nn.dense(d_emb, len(classes))]
    return VanillaClassifier(nn.init_net(specs, seed), list(classes))


def _require_l2_head(clf: KeyProtectedClassifier):
    # the constant 0.5*|phi|^2 term is only droppable when phi is unit-norm
    if clf.net.specs[-1].kind != "l2_normalize":
        raise ShapeError("key-protected classifier must end in l2_normalize")


# ---------------------------------------------------------------------------
# scoring


def score(clf: KeyProtectedClassifier, x, psi: ClassKey):
    if psi.d_key != clf.d_key:
        raise ShapeError(f"key width {psi.d_key} != embedding width {clf.d_key}")
    return clf.embed(x) @ psi.vec


def _sorted_keys(keys):
    if not keys:
        raise ParameterError("no keys to predict with")
    keys = sorted(keys, key=lambda k: k.sort_key)
    return keys, np.stack([k.vec for k in keys])


def predict_from_embeddings(emb: np.ndarray, keys: list[ClassKey]) -> np.ndarray:
    keys, K = _sorted_keys(keys)
    if K.shape[1] != emb.shape[-1]:
        raise ShapeError(f"key width {K.shape[1]} != embedding width {emb.shape[-1]}")
    # argmax returns the first maximum, i.e. the lowest (owner, label)
    idx = np.argmax(np.atleast_2d(emb) @ K.T, axis=1)
    return np.array([keys[i].class_label for i in idx], dtype=object)


def predict(clf: KeyProtectedClassifier, x, keys: list[ClassKey]):
    """Label of the highest-scoring key; a class may own several keys."""
    x = np.asarray(x)
    labels = predict_from_embeddings(clf.embed(x), keys)
    return labels[0] if x.ndim == 1 else labels


def keyed_accuracy(clf, X, y, keys) -> float:
    if len(y) == 0:
        return 0.0
    pred = predict_from_embeddings(clf.embed(X), keys)
    return float(np.mean(pred == np.asarray(y, dtype=object)))


def vanilla_predict(clf: VanillaClassifier, X, allowed=None) -> np.ndarray:
    logits = np.atleast_2d(clf.logits(X))
    classes = clf.classes
    if allowed is not None:
        cols = clf.class_index(allowed)
        logits, classes = logits[:, cols], [clf.classes[c] for c in cols]
    return np.array([classes[i] for i in np.argmax(logits, axis=1)], dtype=object)


def vanilla_accuracy(clf, X, y, allowed=None) -> float:
    if len(y) == 0:
        return 0.0
    return float(np.mean(vanilla_predict(clf, X, allowed) == np.asarray(y, dtype=object)))


# ---------------------------------------------------------------------------
# losses


def key_regression_loss(clf: KeyProtectedClassifier, X, y, keys: list[ClassKey], lam: float = 0.0,
                        owner=None):
    """-sum_i <phi(x_i), psi_{y_i}> + lam*|theta|^2, summed over the batch.

    When ``owner`` is given every key must belong to it; training with someone
    else's key is an access violation.
    """
    _require_l2_head(clf)
    if owner is not None:
        foreign = [k for k in keys if k.owner != owner]
        if foreign:
            raise KeyAccessError(f"{owner!r} cannot train with keys owned by {foreign[0].owner!r}")
    by_label = {}
    for k in keys:
        if k.class_label in by_label:
            raise ParameterError(f"two training keys for class {k.class_label!r}")
        by_label[k.class_label] = k.vec
    try:
        K = np.stack([by_label[c] for c in y])
    except KeyError as e:
        raise KeyAccessError(f"no key available for class {e.args[0]!r}") from None
    emb, tape = nn.forward(clf.net, X)
    if K.shape[1] != emb.shape[1]:
        raise ShapeError(f"key width {K.shape[1]} != embedding width {emb.shape[1]}")
    theta = clf.net.params
    loss = -float(np.sum(emb * K)) + lam * float(theta @ theta)
    grads, _ = nn.backward(clf.net, tape, -K)
    if lam:
        grads += 2.0 * lam * theta
    return loss, grads


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy_loss(clf: VanillaClassifier, X, y, lam: float = 0.0):
    idx = clf.class_index(y)
    logits, tape = nn.forward(clf.net, X)
    logits = np.atleast_2d(logits)
    logp = _log_softmax(logits)
    rows = np.arange(len(idx))
    theta = clf.net.params
    loss = -float(logp[rows, idx].sum()) + lam * float(theta @ theta)
    g = np.exp(logp)
    g[rows, idx] -= 1.0
    grads, _ = nn.backward(clf.net, tape, g[0] if tape.squeeze else g)
    if lam:
        grads += 2.0 * lam * theta
    return loss, grads


# ---------------------------------------------------------------------------
# generalized softmax


def softmax_mc_oracle(phi, d_key: int, n_samples: int, rng: np.random.Generator,
                      chunk: int = 20000) -> tuple[float, float]:
    """Monte-Carlo estimate of E_psi[exp <phi, psi>] for psi ~ N(0, I), and its closed form."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (d_key,):
        raise ShapeError(f"phi must have shape ({d_key},), got {phi.shape}")
    if n_samples < 1:
        raise ParameterError("n_samples must be >= 1")
    if not np.all(np.isfinite(phi)):
        raise ParameterError("phi must be finite")
    total, done = 0.0, 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        total += np.exp(rng.standard_normal((m, d_key)) @ phi).sum()
        done += m
    return total / n_samples, float(np.exp(0.5 * phi @ phi))


def generalized_softmax_prob(clf: KeyProtectedClassifier, x, psi_c: ClassKey):
    """exp(score) / E_psi[exp(score)] with the expectation in closed form exp(0.5)."""
    _require_l2_head(clf)
    return np.exp(score(clf, x, psi_c) - 0.5)
