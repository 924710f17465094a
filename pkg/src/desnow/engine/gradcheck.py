"""Central finite differences, used as the independent oracle for analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(f: Callable[[], Tensor], t: Tensor, indices: Sequence[tuple] | None = None,
                   eps: float = 1e-5) -> np.ndarray:
    """d f / d t at the given flat-or-tuple indices (all entries when None)."""
    if indices is None:
        indices = list(np.ndindex(t.shape))
    out = np.empty(len(indices))
    with no_grad():
        for n, idx in enumerate(indices):
            old = t.data[idx]
            t.data[idx] = old + eps
            fp = f().item()
            t.data[idx] = old - eps
            fm = f().item()
            t.data[idx] = old
            out[n] = (fp - fm) / (2 * eps)
    return out


def relative_error(analytic, numeric) -> float:
    """``||a - n|| / max(||a||, ||n||)``; 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)
