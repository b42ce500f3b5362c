"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))


def numeric_grad(
    f: Callable[[], float],
    x: np.ndarray,
    step: float = 1e-5,
    region: Callable[[], object] | None = None,
    coords: Sequence[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """``(f(x + h) - f(x - h)) / 2h`` per coordinate; ``x`` is perturbed in place.

    With ``region``, a coordinate whose perturbations change the value of
    ``region()`` (evaluated right after ``f``) straddles a kink and is
    returned as NaN. With ``coords`` only those entries are evaluated and
    the rest are NaN.
    """
    grad = np.zeros_like(x) if coords is None else np.full_like(x, np.nan)
    base = None
    if region is not None:
        f()
        base = region()
    if coords is None:
        coords = list(np.ndindex(x.shape))
    for i in coords:
        i = tuple(int(v) for v in i)
        orig = x[i]
        x[i] = orig + step
        fp = f()
        kink = region is not None and region() != base
        x[i] = orig - step
        fm = f()
        kink = kink or (region is not None and region() != base)
        x[i] = orig
        grad[i] = np.nan if kink else (fp - fm) / (2 * step)
    return grad


def grad_check(
    f: Callable[[], float],
    inputs: Sequence[np.ndarray],
    analytic: Sequence[np.ndarray],
    step: float = 1e-5,
    region: Callable[[], object] | None = None,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``f`` evaluates a scalar from the current contents of ``inputs`` (float64
    or extended-precision arrays that are perturbed in place). ``samples``
    limits the check to that many random coordinates per input. ``region`` optionally identifies the
    piecewise-smooth cell of the current evaluation (ReLU masks, pool
    winners, ...); coordinates whose perturbation leaves the cell are skipped.
    """
    worst = 0.0
    for x, a in zip(inputs, analytic):
        if x.dtype not in (np.float64, np.longdouble):
            raise TypeError("gradient checking requires float64 or longdouble inputs")
        coords = None
        if samples is not None and samples < x.size:
            rng = rng if rng is not None else np.random.default_rng(0)
            flat = rng.choice(x.size, size=samples, replace=False)
            coords = [np.unravel_index(j, x.shape) for j in flat]
        n = numeric_grad(f, x, step, region, coords)
        a = np.asarray(a)
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite analytic gradient")
        if region is None and coords is None and not np.all(np.isfinite(n)):
            raise FloatingPointError("non-finite value during gradient check")
        smooth = ~np.isnan(n)
        if smooth.any():
            worst = max(worst, float(relative_error(a[smooth], n[smooth]).max()))
    return worst
