"""Central finite-difference oracle for gradient verification."""

from __future__ import annotations

import numpy as np

from .tensor import no_grad


def _scalar(value):
    data = getattr(value, "data", value)
    return float(np.asarray(data).reshape(-1)[0])


def numerical_grad(fn, params, h=1e-5):
    """Central differences of scalar ``fn()`` with respect to each tensor in ``params``.

    ``fn`` is re-evaluated from scratch for every perturbation and must read
    the parameters' ``data`` arrays, which are perturbed in place and restored.
    """
    grads = []
    with no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            g = np.zeros(flat.size)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                fp = _scalar(fn())
                flat[k] = orig - h
                fm = _scalar(fn())
                flat[k] = orig
                g[k] = (fp - fm) / (2.0 * h)
            grads.append(g.reshape(p.data.shape))
    return grads


def relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_grads(fn, params, h=1e-5):
    """Return the worst relative error between backprop and finite differences.

    ``fn`` builds the scalar loss; gradients on ``params`` are reset first.
    """
    for p in params:
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.array(p.grad) for p in params]
    numeric = numerical_grad(fn, params, h=h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
