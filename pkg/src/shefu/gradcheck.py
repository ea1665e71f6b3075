"""Central finite-difference oracle for tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def grad_check(
    f: Callable[[Tensor], Tensor],
    point: np.ndarray,
    h: float = 1e-5,
    coords: Sequence[int] | None = None,
    *,
    floor: float = 1e-8,
    refine: Sequence[float] = (),
) -> float:
    """Max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, floor).

    ``f`` maps a tensor to a scalar tensor. Run it in float64; float32 leaves
    no headroom for the difference quotient. ``coords`` restricts the
    finite differences to those flat indices (all of them by default).

    ``floor`` sets the gradient magnitude below which errors count as
    absolute; it should sit above the rounding noise of the quotient
    (about ulp(f) / h). ``refine`` lists smaller steps to retry a coordinate
    with when the first step straddles a kink (a max-pool or clip switch):
    the coordinate keeps its best error over the steps tried.
    """
    point = np.asarray(point, dtype=np.float64)
    with Tape() as tape:
        x = Tensor(point.copy(), requires_grad=True)
        y = f(x)
    (analytic,) = tape.backward(y, [x])

    flat = point.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords, dtype=np.int64)
    if idx.size == 0:
        return 0.0
    a_flat = analytic.reshape(-1)

    def quotient(i: int, step: float) -> float:
        plus, minus = flat.copy(), flat.copy()
        plus[i] += step
        minus[i] -= step
        fp = f(Tensor(plus.reshape(point.shape))).item()
        fm = f(Tensor(minus.reshape(point.shape))).item()
        return (fp - fm) / (2 * step)

    worst = 0.0
    for i in idx:
        a = a_flat[i]
        err = np.inf
        for step in (h, *refine):
            n = quotient(int(i), step)
            err = min(err, abs(a - n) / max(abs(a), abs(n), floor))
            if err <= 1e-6:
                break
        worst = max(worst, float(err))
    return worst
