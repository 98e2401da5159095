"""Finite-difference verification of tape gradients.

``finite_diff_check`` compares the tape gradient of a scalar-valued function
against central differences, coordinate by coordinate, and returns the worst
relative error.  For large inputs a random subset of coordinates is probed.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from bevseg.autodiff.tensor import Tape, Tensor, backward
from bevseg.errors import NumericError


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float | None = None,
                      max_coords: int = 64, rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradient of ``f`` at ``x`` and central FD.

    ``f`` must build a scalar output from ``x`` using ops (it runs three
    times: once under a tape, twice per probed coordinate without one).
    Relative error uses ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    if step is None:
        step = 1e-6 if x.dtype == np.float64 else 1e-3
    x.requires_grad = True
    x.zero_grad()
    with Tape() as tape:
        out = f(x)
        if out.size != 1:
            raise ValueError("finite_diff_check needs a scalar-valued function")
        backward(tape, out)
    if x.grad is None:
        raise NumericError("function output does not depend on the input")
    analytic = x.grad.astype(np.float64).reshape(-1).copy()
    if not np.isfinite(analytic).all():
        raise NumericError("tape gradient contains non-finite values")

    n = x.size
    if n <= max_coords:
        coords = np.arange(n)
    else:
        coords = (rng or np.random.default_rng(0)).choice(n, size=max_coords, replace=False)

    flat = x.data.reshape(-1)
    worst = 0.0
    for idx in coords:
        orig = flat[idx]
        flat[idx] = orig + step
        hi = float(f(x).data.reshape(()))
        flat[idx] = orig - step
        lo = float(f(x).data.reshape(()))
        flat[idx] = orig
        fd = (hi - lo) / (2.0 * step)
        if not np.isfinite(fd):
            raise NumericError(f"finite difference is not finite at coordinate {idx}")
        a = analytic[idx]
        rel = abs(fd - a) / max(abs(fd), abs(a), 1e-8)
        worst = max(worst, rel)
    return worst
