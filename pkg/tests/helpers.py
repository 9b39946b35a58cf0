"""Finite-difference gradient checking shared by the test modules."""

import numpy as np

from context_forge import tensor as T


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f, arrays, index, eps=1e-6):
    """Central differences of scalar ``f(arrays)`` with respect to ``arrays[index]``."""
    x = arrays[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f(arrays)
        x[i] = old - eps
        down = f(arrays)
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def gradcheck(op, arrays, rng, differentiable=None):
    """Compare analytic and numeric gradients of ``sum(op(*tensors) * R)``; returns max rel. error."""
    differentiable = range(len(arrays)) if differentiable is None else differentiable
    with T.default_dtype(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        out = op(*[T.Tensor(a) for a in arrays])
        weights = rng.standard_normal(out.shape)

        def f(arrs):
            with T.no_grad():
                return float(np.sum(op(*[T.Tensor(a) for a in arrs]).data * weights))

        tensors = [T.Tensor(a, requires_grad=i in differentiable) for i, a in enumerate(arrays)]
        loss = T.tensor_sum(T.mul(op(*tensors), T.Tensor(weights)))
        T.backward(loss)
        worst = 0.0
        for i in differentiable:
            num = numeric_grad(f, arrays, i)
            worst = max(worst, rel_err(tensors[i].grad, num))
    return worst
