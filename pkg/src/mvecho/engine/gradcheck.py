"""Central finite-difference gradient checking."""

import numpy as np


def numerical_gradient(fn, tensor, step=1e-5):
    """d fn() / d tensor by central differences; ``fn`` returns a scalar Tensor."""
    data = tensor.data
    grad = np.zeros_like(data)
    flat, gflat = data.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(fn().data)
        flat[i] = orig - step
        lo = float(fn().data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(analytic, numeric):
    """Max-norm error scaled by the larger gradient magnitude.

    Below a magnitude of 1e-4 the scale is clamped, so an identically-zero
    gradient (a softmax shift, say) is judged by its absolute error rather
    than by finite-difference round-off divided by zero.
    """
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-4)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(fn, tensors, step=1e-5):
    """Return the worst relative error over ``tensors`` (a name->Tensor mapping).

    Every tensor must be a float64 leaf with ``requires_grad=True``.
    """
    for t in tensors.values():
        t.grad = None
    fn().backward()
    worst = 0.0
    for name, t in tensors.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_gradient(fn, t, step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
