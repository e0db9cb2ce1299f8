"""Central finite-difference gradient oracle shared by the test suite."""

import numpy as np


def finite_difference_gradient(loss_fn, param, step=1e-5):
    """d loss / d param by central differences, perturbing values in place.

    loss_fn re-runs the forward pass and returns a float; it must depend on
    param.values only through reads.
    """
    grad = np.zeros_like(param.values)
    flat = param.values.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn()
        flat[i] = orig - step
        down = loss_fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def max_rel_error(analytic, numeric, floor=1e-6):
    """Worst-case relative disagreement, with a floor so true zeros compare fine."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
