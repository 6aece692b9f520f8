"""Central finite-difference gradient checking."""
import numpy as np

from .tensor import Tensor, backward, no_grad


def relative_error(analytic, numeric, floor=1e-7):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numeric_grad(f, t, index, eps=1e-6):
    """d f() / d t.data[index] by central differences. ``f`` returns a scalar Tensor."""
    with no_grad():
        orig = t.data[index]
        t.data[index] = orig + eps
        hi = float(f().data)
        t.data[index] = orig - eps
        lo = float(f().data)
        t.data[index] = orig
    return (hi - lo) / (2 * eps)


def check_gradients(f, inputs, n_coords=None, eps=1e-6, rng=None, floor=1e-7):
    """Compare backward() against central differences.

    ``f`` maps nothing to a scalar Tensor built from ``inputs``. With
    ``n_coords`` set, only that many random coordinates per input are probed.
    Components smaller than ``floor`` are compared on an absolute scale.
    Returns the maximum relative error observed.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for t in inputs:
        t.grad = None
    backward(f())
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = np.arange(t.data.size)
        if n_coords is not None and n_coords < t.data.size:
            flat = rng.choice(t.data.size, size=n_coords, replace=False)
        for k in flat:
            idx = np.unravel_index(k, t.shape)
            num = numeric_grad(f, t, idx, eps)
            worst = max(worst, float(relative_error(analytic[idx], num, floor)))
    return worst


def random_tensor(rng, shape, low=-2.0, high=2.0, requires_grad=True):
    return Tensor(rng.uniform(low, high, size=shape), dtype=np.float64, requires_grad=requires_grad)
