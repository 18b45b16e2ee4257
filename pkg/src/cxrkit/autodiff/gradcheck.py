"""Finite-difference verification of recorded gradients."""

from __future__ import annotations

import numpy as np

from ..exceptions import ShapeError
from .tensor import Tensor, backward, no_grad


def _relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def grad_check_params(loss_fn, tensors, h: float = 1e-4,
                      sample: int | None = None, seed: int = 0) -> float:
    """Compare recorded grads of ``tensors`` against central differences.

    ``loss_fn`` must rebuild the scalar loss from the tensors' current values
    on every call (it is re-evaluated with perturbed data). Returns the worst
    relative error ``|a - f| / max(1, |a|, |f|)`` over all probed elements.

    ``sample`` caps the probed elements per tensor with a seeded choice;
    every element is probed when it is None.
    """
    tensors = list(tensors)
    if not tensors:
        raise ValueError("grad_check_params needs at least one tensor")
    for t in tensors:
        t.zero_grad()
    loss = loss_fn()
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ShapeError("loss_fn must return a scalar Tensor")
    backward(loss)

    worst = 0.0
    for t_index, t in enumerate(tensors):
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        if sample is None or sample >= t.size:
            probes = np.arange(t.size)
        else:
            rng = np.random.default_rng([seed, t_index])
            probes = np.sort(rng.choice(t.size, size=sample, replace=False))
        base = t.data
        flat = base.reshape(-1).copy()
        try:
            for i in probes:
                saved = flat[i]
                flat[i] = saved + h
                t.data = flat.reshape(base.shape)
                with no_grad():
                    up = loss_fn().item()
                flat[i] = saved - h
                t.data = flat.reshape(base.shape)
                with no_grad():
                    down = loss_fn().item()
                flat[i] = saved
                numeric = (up - down) / (2.0 * h)
                worst = max(worst, _relative_error(float(analytic[i]), numeric))
        finally:
            t.data = base
    return worst


def grad_check(f, x, h: float = 1e-4, sample: int | None = None, seed: int = 0) -> float:
    """Worst relative error of df/dx for a graph builder ``f``.

    ``f`` takes a Tensor and returns a scalar Tensor; it is called once to
    record gradients and twice per probed element for central differences.
    """
    x0 = Tensor(x.data if isinstance(x, Tensor) else x, requires_grad=True)
    return grad_check_params(lambda: f(x0), [x0], h=h, sample=sample, seed=seed)
