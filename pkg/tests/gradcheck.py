"""Central-difference gradient checking shared by the test modules."""

import numpy as np

from taskcodec.tensor import Tensor, check_mode


def numeric_grad(fn, arrays, weights, eps):
    """d/dx of sum(fn(*xs) * weights) by central differences, in float64."""
    grads = []
    with check_mode():
        for k, base in enumerate(arrays):
            g = np.zeros(base.shape)
            for idx in np.ndindex(base.shape):
                vals = []
                for sign in (1.0, -1.0):
                    xs = [a.astype(np.float64) for a in arrays]
                    xs[k][idx] += sign * eps
                    out = fn(*[Tensor(x) for x in xs])
                    vals.append(float(np.sum(out.data.astype(np.float64) * weights)))
                g[idx] = (vals[0] - vals[1]) / (2 * eps)
            grads.append(g)
    return grads


def analytic_grad(fn, arrays, weights, dtype):
    tensors = [Tensor(a, requires_grad=True, dtype=dtype) for a in arrays]
    out = fn(*tensors)
    (out * Tensor(weights, dtype=dtype)).sum().backward()
    return [np.zeros(a.shape) if t.grad is None else t.grad.astype(np.float64) for t, a in zip(tensors, arrays)]


def rel_error(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def max_rel_error(fn, arrays, rng, precision):
    """Worst relative error over all inputs; ``precision`` is 32 or 64."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    with check_mode():
        shape = fn(*[Tensor(a) for a in arrays]).shape
    weights = rng.standard_normal(shape)
    if precision == 64:
        with check_mode():
            analytic = analytic_grad(fn, arrays, weights, np.float64)
        numeric = numeric_grad(fn, arrays, weights, 1e-6)
    else:
        analytic = analytic_grad(fn, [a.astype(np.float32) for a in arrays], weights, np.float32)
        numeric = numeric_grad(fn, [a.astype(np.float32).astype(np.float64) for a in arrays], weights, 1e-5)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))
