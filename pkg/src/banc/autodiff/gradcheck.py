"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(f: Callable[[], Tensor], t: Tensor, index, h: float) -> float:
    flat = t.data.reshape(-1)
    orig = flat[index]
    flat[index] = orig + h
    fp = float(f().data)
    flat[index] = orig - h
    fm = float(f().data)
    flat[index] = orig
    return (fp - fm) / (2.0 * h)


def _rel_err(a: float, n: float, atol: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), atol)


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float | Sequence[float] = 1e-5,
    max_per_input: int | None = None,
    atol: float = 1e-8,
    seed: int = 0,
) -> float:
    """Worst relative error between backprop and central differences.

    ``f`` is a closure that rebuilds the scalar loss from the current contents
    of ``inputs`` (they are perturbed in place).  The relative error of one
    element is ``|a - n| / max(|a|, |n|, atol)``.  With ``max_per_input`` only a
    random subset of elements of each input is probed.  ``h`` may be a sequence
    of step sizes; each element then keeps its best-agreeing step, since
    roundoff dominates small steps and activation kinks dominate large ones.
    """
    steps = (h,) if np.isscalar(h) else tuple(h)
    for t in inputs:
        t.grad = None
    loss = f()
    if loss.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {loss.shape}")
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in inputs:
        if not t.data.flags.c_contiguous:
            raise ValueError("grad_check perturbs inputs in place; they must be C-contiguous")
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        idx = np.arange(t.size)
        if max_per_input is not None and t.size > max_per_input:
            idx = np.sort(rng.choice(t.size, size=max_per_input, replace=False))
        for i in idx:
            a = float(analytic[i])
            err = min(_rel_err(a, numerical_grad(f, t, i, step), atol) for step in steps)
            worst = max(worst, err)
    return worst
