"""Private class keys: generation, perturbed keys, orthonormal sets, collision statistics."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError


@dataclass(frozen=True, eq=False)
class ClassKey:
    vec: np.ndarray
    class_label: int
    owner: str

    def __post_init__(self):
        v = np.asarray(self.vec, dtype=np.float64)
        if v.ndim != 1 or v.size < 2:
            raise ParameterError("a key needs at least two dimensions")
        v.setflags(write=False)
        object.__setattr__(self, "vec", v)

    @property
    def d_key(self) -> int:
        return self.vec.size

    @property
    def sort_key(self) -> tuple:
        return (self.owner, self.class_label)


@dataclass
class KeyStatsReport:
    d_key: int
    n_vectors: int
    n_repeats: int
    distribution: str
    max_of_max_dot: float
    per_repeat_max: list = field(default_factory=list)


def _unit(v):
    n = np.linalg.norm(v)
    return v / n


def generate_key(d_key: int, rng: np.random.Generator, class_label=0, owner="") -> ClassKey:
    if d_key < 2:
        raise ParameterError(f"d_key must be >= 2, got {d_key}")
    return ClassKey(_unit(rng.standard_normal(d_key)), class_label, owner)


def generate_delta_key(psi_desired: ClassKey, delta: float, rng: np.random.Generator,
                       class_label=None, owner=None) -> ClassKey:
    """Random unit key at Euclidean distance exactly ``delta`` from ``psi_desired``.

    On the unit sphere a chord of length delta subtends the angle
    2*arcsin(delta/2); the new key is rotated by that angle towards a uniformly
    random direction orthogonal to ``psi_desired``.
    """
    if not 0.0 <= delta <= 2.0:
        raise ParameterError(f"delta must lie in [0, 2], got {delta}")
    p = psi_desired.vec
    u = rng.standard_normal(p.size)
    u -= (u @ p) * p
    u -= (u @ p) * p  # second pass for numerical orthogonality
    u = _unit(u)
    alpha = 2.0 * np.arcsin(delta / 2.0)
    out = np.cos(alpha) * p + np.sin(alpha) * u
    return ClassKey(
        _unit(out),
        psi_desired.class_label if class_label is None else class_label,
        psi_desired.owner if owner is None else owner,
    )


def generate_orthonormal_keys(d_key: int, n_classes: int, rng: np.random.Generator,
                              labels=None, owner="") -> list[ClassKey]:
    if d_key < 2:
        raise ParameterError(f"d_key must be >= 2, got {d_key}")
    if n_classes > d_key:
        raise ParameterError(f"cannot fit {n_classes} orthonormal keys in {d_key} dimensions")
    q, _ = np.linalg.qr(rng.standard_normal((d_key, n_classes)))
    labels = list(range(n_classes)) if labels is None else list(labels)
    return [ClassKey(q[:, i].copy(), labels[i], owner) for i in range(n_classes)]


def sample_unit_rows(n: int, d: int, distribution: str, rng: np.random.Generator) -> np.ndarray:
    if distribution == "gaussian":
        m = rng.standard_normal((n, d))
    elif distribution == "uniform":
        m = rng.uniform(-1.0, 1.0, size=(n, d))
    else:
        raise ParameterError(f"unknown distribution {distribution!r}")
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def key_collision_stats(d_key: int, n_vectors: int, n_repeats: int, distribution: str,
                        rng: np.random.Generator) -> KeyStatsReport:
    """Max over repeats of the max pairwise dot product among ``n_vectors`` random unit keys."""
    if n_vectors < 2:
        raise ParameterError("need at least two vectors to form a pair")
    if n_repeats < 1:
        raise ParameterError("need at least one repeat")
    iu = np.triu_indices(n_vectors, k=1)
    per_repeat = []
    for _ in range(n_repeats):
        m = sample_unit_rows(n_vectors, d_key, distribution, rng)
        per_repeat.append(float((m @ m.T)[iu].max()))
    return KeyStatsReport(d_key, n_vectors, n_repeats, distribution, max(per_repeat), per_repeat)


# ---------------------------------------------------------------------------
# .keys files: header "d_key,n_keys", then "owner,class_label,v1,...,v_d"


def save_keys(path, keys: list[ClassKey]) -> None:
    if not keys:
        raise ParameterError("no keys to save")
    d = keys[0].d_key
    lines = [f"{d},{len(keys)}"]
    for k in keys:
        if k.d_key != d:
            raise ParameterError("keys in one file must share d_key")
        lines.append(",".join([str(k.owner), str(k.class_label)] + [f"{v:.9g}" for v in k.vec]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_keys(path) -> list[ClassKey]:
    rows = Path(path).read_text().splitlines()
    try:
        d, n = (int(t) for t in rows[0].split(","))
    except (IndexError, ValueError) as e:
        raise FormatError(f"{path}: bad header") from e
    if len(rows) - 1 != n:
        raise FormatError(f"{path}: header declares {n} keys, found {len(rows) - 1}")
    keys = []
    for lineno, row in enumerate(rows[1:], start=2):
        parts = row.split(",")
        if len(parts) != d + 2:
            raise FormatError(f"{path}:{lineno}: expected {d + 2} fields, got {len(parts)}")
        label = int(parts[1]) if parts[1].lstrip("-").isdigit() else parts[1]
        try:
            vec = np.array(parts[2:], dtype=np.float64)
        except ValueError as e:
            raise FormatError(f"{path}:{lineno}: non-numeric key entry") from e
        norm = np.linalg.norm(vec)
        if not np.isfinite(norm) or norm < 1e-6:
            raise FormatError(f"{path}:{lineno}: key vector is zero or non-finite")
        # renormalize: 9 significant digits leave ~1e-9 of norm drift
        keys.append(ClassKey(vec / norm, label, parts[0]))
    return keys
