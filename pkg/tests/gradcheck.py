"""Finite-difference gradient checking shared by the test modules."""

import numpy as np

from ditfuse.tensor import Tensor, backward, finite_diff_grad


def check_grad(fn, inputs, wrt=None, h=1e-3, rtol=1e-4, atol=1e-6):
    """Compare backward() with central differences for each input in ``wrt``.

    ``fn`` maps a list of Tensors to a scalar Tensor. Returns the worst
    relative error seen.
    """
    wrt = range(len(inputs)) if wrt is None else wrt
    worst = 0.0
    for i in wrt:
        ts = [Tensor(np.array(x, dtype=np.float64), requires_grad=(j == i)) for j, x in enumerate(inputs)]
        backward(fn(ts))
        analytic = ts[i].grad

        def f(xi, i=i):
            return fn([xi if j == i else Tensor(np.array(x, dtype=np.float64)) for j, x in enumerate(inputs)])

        numeric = finite_diff_grad(f, Tensor(np.array(inputs[i], dtype=np.float64)), h=h)
        err = np.abs(analytic - numeric)
        assert np.all(err <= rtol * np.abs(numeric) + atol), f"input {i}: max abs err {err.max():.3g}"
        worst = max(worst, float((err / np.maximum(np.abs(numeric), atol / rtol)).max()))
    return worst
