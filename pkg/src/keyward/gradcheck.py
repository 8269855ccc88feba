"""Central finite-difference gradients, used as an independent check on backprop."""

import numpy as np


def numerical_grad(f, x: np.ndarray, h: float = 1e-5, order: int = 2) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (``x`` is restored afterwards).

    ``order=4`` uses the five-point stencil, whose truncation error is O(h^4).
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.empty_like(flat)

    def at(i, orig, t):
        flat[i] = orig + t
        return f(x)

    for i in range(flat.size):
        orig = flat[i]
        if order == 2:
            out[i] = (at(i, orig, h) - at(i, orig, -h)) / (2.0 * h)
        else:
            out[i] = (8.0 * (at(i, orig, h) - at(i, orig, -h)) - (at(i, orig, 2 * h) - at(i, orig, -2 * h))) / (12.0 * h)
        flat[i] = orig
    return out.reshape(x.shape)


def rel_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """Per-coordinate |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
