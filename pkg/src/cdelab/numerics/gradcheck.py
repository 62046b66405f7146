"""Central finite differences, used as the independent oracle for backward()."""

from __future__ import annotations

from typing import Callable

import numpy as np


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """||a - b|| / max(||a||, ||b||, floor) over the whole array.

    The floor makes the check absolute for gradients that vanish identically,
    e.g. an output bias that cancels in a difference of encodings.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"relative_error: shapes differ {a.shape} vs {b.shape}")
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def roundoff_bound(f0: float, h: float, eps: float = np.finfo(np.float64).eps) -> float:
    """Worst-case error of a central difference from rounding alone, with margin."""
    return 16.0 * eps * max(abs(f0), 1.0) / h


def gradients_agree(analytic: np.ndarray, numeric: np.ndarray, f0: float, h: float, tol: float = 1e-4) -> bool:
    """||a - n|| <= tol * max(||a||, ||n||) + rounding noise of the central difference.

    For gradients well above the noise this is the relative test at ``tol``;
    for gradients that vanish (e.g. a bias that cancels in z_tilde - z) only
    the rounding floor remains.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"gradients_agree: shapes differ {a.shape} vs {n.shape}")
    noise = roundoff_bound(f0, h) * np.sqrt(a.size)
    return float(np.linalg.norm(a - n)) <= tol * max(np.linalg.norm(a), np.linalg.norm(n)) + noise
