import numpy as np
import pytest

from latentdemand import tensor_core as tc


@pytest.fixture(autouse=True)
def _finite_checks():
    # Debug-mode finite checks on every op while tests run.
    tc.set_debug_checks(True)
    yield
    tc.set_debug_checks(False)


def finite_diff_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function at x."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x)
        flat[i] = orig - eps
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def grad_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7):
    """Relative errors where the gradient is measurable; coordinates where
    both sides sit below the floor cannot be resolved by finite differences
    and are skipped."""
    analytic = np.asarray(analytic, dtype=float).ravel()
    numeric = np.asarray(numeric, dtype=float).ravel()
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    mask = scale > floor
    rel = np.abs(analytic[mask] - numeric[mask]) / scale[mask]
    return rel, int(mask.sum()), int(mask.size)
