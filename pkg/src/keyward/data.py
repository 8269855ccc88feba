"""Datasets: MNIST IDX files, synthetic Gaussian blobs, per-participant partitions,
and the centrally trained oracle used to score attack reconstructions."""

from __future__ import annotations

import gzip
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import FormatError, FrameworkSetupError, ParameterError

log = logging.getLogger(__name__)

IDX_LABELS = 0x00000801
IDX_IMAGES = 0x00000803


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    split: str = "train"
    image_shape: tuple | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.samples.ndim != 2:
            raise ParameterError("samples must be a 2-D array")
        if len(self.samples) != len(self.labels):
            raise ParameterError(f"{len(self.samples)} samples but {len(self.labels)} labels")
        if not np.all(np.isfinite(self.samples)):
            raise ParameterError("samples contain non-finite values")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def classes(self) -> list:
        return sorted(set(self.labels.tolist()))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.samples[idx], self.labels[idx], self.split, self.image_shape)

    def of_class(self, c) -> "Dataset":
        return self.subset(np.flatnonzero(self.labels == c))


@dataclass
class PartitionPlan:
    classes: dict  # participant id -> iterable of class labels
    shared_classes: set = field(default_factory=set)


# ---------------------------------------------------------------------------
# IDX


def parse_idx(data: bytes) -> np.ndarray:
    """Decode an IDX byte stream.

    Images come back as float (n, rows*cols) scaled to [0, 1]; labels as int64 (n,).
    """
    if len(data) < 4:
        raise FormatError("truncated IDX header at byte 0")
    (magic,) = struct.unpack_from(">I", data)
    if magic == IDX_LABELS:
        ndim = 1
    elif magic == IDX_IMAGES:
        ndim = 3
    else:
        raise FormatError(f"bad IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"truncated IDX header at byte {len(data)}")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    need = int(np.prod(dims))
    if len(data) - header < need:
        raise FormatError(f"truncated IDX payload at byte {len(data)}, expected {header + need}")
    if len(data) - header > need:
        raise FormatError(f"trailing bytes after IDX payload at byte {header + need}")
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=header)
    if ndim == 1:
        return raw.astype(np.int64)
    return raw.reshape(dims[0], dims[1] * dims[2]).astype(np.float64) / 255.0


def idx_dims(data: bytes) -> tuple:
    (magic,) = struct.unpack_from(">I", data)
    ndim = 1 if magic == IDX_LABELS else 3
    return struct.unpack_from(f">{ndim}I", data, 4)


def serialize_idx(arr: np.ndarray, image_shape: tuple | None = None) -> bytes:
    """Inverse of :func:`parse_idx`; images are rescaled by 255 and rounded."""
    arr = np.asarray(arr)
    if image_shape is None:
        payload = arr.astype(np.uint8)
        return struct.pack(">II", IDX_LABELS, payload.size) + payload.tobytes()
    rows, cols = image_shape
    if arr.ndim != 2 or arr.shape[1] != rows * cols:
        raise FormatError(f"images of width {arr.shape[-1]} do not match {rows}x{cols}")
    payload = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    return struct.pack(">IIII", IDX_IMAGES, arr.shape[0], rows, cols) + payload.tobytes()


def read_idx_file(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def _find(directory: Path, stem: str) -> Path:
    for cand in (directory / stem, directory / (stem + ".gz")):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def load_mnist(directory, split="train", per_class: int | None = None) -> Dataset:
    """Load ``{split}-images-idx3-ubyte`` / ``{split}-labels-idx1-ubyte`` (optionally gzipped)."""
    directory = Path(directory)
    img_bytes = read_idx_file(_find(directory, f"{split}-images-idx3-ubyte"))
    labels = parse_idx(read_idx_file(_find(directory, f"{split}-labels-idx1-ubyte")))
    images = parse_idx(img_bytes)
    _, rows, cols = idx_dims(img_bytes)
    ds = Dataset(images, labels, split, (rows, cols))
    if per_class is not None:
        keep = np.concatenate([np.flatnonzero(labels == c)[:per_class] for c in ds.classes])
        ds = ds.subset(np.sort(keep))
    return ds


# ---------------------------------------------------------------------------
# synthetic data


def synth_blobs(n_classes: int, per_class: int, data_dim: int, spread: float = 0.3, seed: int = 0,
                center_scale: float = 1.0, test_fraction: float = 0.2) -> tuple[Dataset, Dataset]:
    """Isotropic Gaussian classes around random centers, split 80/20 per class.

    Centers are drawn from N(0, center_scale^2 I); placement is rejected and
    redrawn until all pairwise center distances are at least 6*spread.
    """
    if n_classes < 2:
        raise ParameterError("need at least two classes")
    if per_class < 2:
        raise ParameterError("need at least two samples per class to split")
    rng = np.random.default_rng(seed)
    for _ in range(100):
        centers = rng.standard_normal((n_classes, data_dim)) * center_scale
        diff = centers[:, None, :] - centers[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        if dist[np.triu_indices(n_classes, 1)].min() >= 6.0 * spread:
            break
    else:
        raise ParameterError(
            f"could not place {n_classes} centers 6*spread apart in {data_dim} dims; raise center_scale"
        )
    n_test = max(1, int(round(per_class * test_fraction)))
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for c in range(n_classes):
        pts = centers[c] + spread * rng.standard_normal((per_class, data_dim))
        tr_x.append(pts[n_test:])
        te_x.append(pts[:n_test])
        tr_y += [c] * (per_class - n_test)
        te_y += [c] * n_test
    train = Dataset(np.concatenate(tr_x), np.array(tr_y), "train")
    test = Dataset(np.concatenate(te_x), np.array(te_y), "test")
    train.centers = test.centers = centers
    return train, test


def save_csv(path, ds: Dataset) -> None:
    with open(path, "w") as f:
        for lab, row in zip(ds.labels, ds.samples):
            f.write(",".join([str(lab)] + [f"{v:.9g}" for v in row]) + "\n")


def load_csv(path, split="train") -> Dataset:
    arr = np.loadtxt(path, delimiter=",", ndmin=2)
    return Dataset(arr[:, 1:], arr[:, 0].astype(np.int64), split)


def partition(ds: Dataset, plan: PartitionPlan, rng: np.random.Generator) -> dict:
    """Split ``ds`` by class; a shared class is divided at random among its holders."""
    present = set(ds.classes)
    holders: dict = {}
    for pid, classes in plan.classes.items():
        for c in classes:
            if c not in present:
                raise ParameterError(f"class {c!r} assigned to {pid!r} is absent from the data")
            holders.setdefault(c, []).append(pid)
    for c, hs in holders.items():
        if len(hs) > 1 and c not in plan.shared_classes:
            raise ParameterError(f"class {c!r} is held by {hs} but not declared shared")
    idx_of = {pid: [] for pid in plan.classes}
    for c, hs in holders.items():
        idx = np.flatnonzero(ds.labels == c)
        if len(hs) > 1:
            idx = rng.permutation(idx)
        for pid, part in zip(hs, np.array_split(idx, len(hs))):
            idx_of[pid].append(part)
    return {
        pid: ds.subset(np.sort(np.concatenate(parts)) if parts else np.array([], dtype=int))
        for pid, parts in idx_of.items()
    }


# ---------------------------------------------------------------------------
# oracle


@dataclass
class OracleClassifier:
    """Centrally trained classifier plus a support gate.

    A sample counts as class ``c`` only when the network predicts ``c`` and the
    sample lies inside the region covered by class ``c``'s training data
    (standardized distance to the class mean below ``gate_scale`` times the
    ``gate_quantile`` of the training distances). Off-support samples are labelled -1.
    """

    net: nn.Net
    classes: list
    means: np.ndarray
    scales: np.ndarray
    radii: np.ndarray
    test_accuracy: float

    def digest(self) -> str:
        return hashlib.sha256(self.net.params.tobytes()).hexdigest()

    def _dist(self, X, ci):
        return np.sqrt(np.mean(((X - self.means[ci]) / self.scales[ci]) ** 2, axis=1))

    def raw_predict(self, X) -> np.ndarray:
        logits = np.atleast_2d(self.net(np.atleast_2d(X)))
        return np.argmax(logits, axis=1)

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        ci = self.raw_predict(X)
        out = np.array([self.classes[i] for i in ci])
        d = np.empty(len(X))
        for k in np.unique(ci):
            m = ci == k
            d[m] = self._dist(X[m], k)
        out[d > self.radii[ci]] = -1
        return out


@dataclass
class OracleConfig:
    hidden: tuple = (128, 64)
    epochs: int = 30
    batch: int = 32
    lr: float = 0.01
    seed: int = 1234
    min_accuracy: float = 0.95
    gate_quantile: float = 0.999
    # radius multiplier on top of the quantile; leaves room for good reconstructions
    gate_scale: float = 1.5


def train_oracle(train: Dataset, test: Dataset, cfg: OracleConfig = OracleConfig()) -> OracleClassifier:
    classes = train.classes
    lookup = {c: i for i, c in enumerate(classes)}
    y = np.array([lookup[c] for c in train.labels])
    specs, prev = [], train.dim
    for h in cfg.hidden:
        specs += [nn.dense(prev, h), nn.leaky_relu(h)]
        prev = h
    specs.append(nn.dense(prev, len(classes)))
    net = nn.init_net(specs, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    lr = cfg.lr / cfg.batch
    for _ in range(cfg.epochs):
        order = rng.permutation(len(y))
        for s in range(0, len(order), cfg.batch):
            b = order[s : s + cfg.batch]
            logits, tape = nn.forward(net, train.samples[b])
            z = logits - logits.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(len(b)), y[b]] -= 1.0
            g, _ = nn.backward(net, tape, p)
            nn.step(net, g, lr)
    means = np.stack([train.samples[y == i].mean(axis=0) for i in range(len(classes))])
    scales = np.stack([train.samples[y == i].std(axis=0) for i in range(len(classes))])
    # floor keeps near-constant features (e.g. blank image borders) from dominating
    scales = scales + 0.1 * scales.mean()
    oracle = OracleClassifier(net, classes, means, scales, np.zeros(len(classes)), 0.0)
    oracle.radii = cfg.gate_scale * np.array(
        [np.quantile(oracle._dist(train.samples[y == i], i), cfg.gate_quantile) for i in range(len(classes))]
    )
    pred = np.array([classes[i] for i in oracle.raw_predict(test.samples)])
    oracle.test_accuracy = float(np.mean(pred == test.labels))
    if oracle.test_accuracy < cfg.min_accuracy:
        raise FrameworkSetupError(
            f"oracle test accuracy {oracle.test_accuracy:.3f} is below {cfg.min_accuracy}"
        )
    return oracle


def oracle_score(oracle: OracleClassifier, samples, target_class) -> float:
    """Fraction of ``samples`` the oracle assigns (on-support) to ``target_class``."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        log.warning("oracle_score called with no samples; returning 0")
        return 0.0
    return float(np.mean(oracle.predict(samples) == target_class))
