"""Central finite differences, kept independent of the analytic backprop."""
import numpy as np


def numeric_grad(f, m: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """d f / d m by perturbing ``m`` in place, one entry at a time."""
    g = np.zeros_like(m)
    for idx in np.ndindex(m.shape):
        orig = m[idx]
        m[idx] = orig + step
        up = f()
        m[idx] = orig - step
        down = f()
        m[idx] = orig
        g[idx] = (up - down) / (2 * step)
    return g


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)
