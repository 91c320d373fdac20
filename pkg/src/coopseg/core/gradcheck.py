"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .ops import track_kinks
from .tensor import Tensor, backward


def kink_distance(f: Callable[[], Tensor]) -> float:
    """Smallest gap to a relu/maxpool tie observed while evaluating ``f``."""
    with track_kinks() as tracker:
        f()
    return tracker.distance


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    n_coords: int = 50,
    seed: int = 0,
) -> float:
    """Max of |analytic - numeric| / max(1, |numeric|) over sampled coordinates.

    ``f`` must rebuild the graph from the current ``params`` values on each call
    and return a scalar. Each parameter contributes ``min(size, n_coords)``
    randomly chosen coordinates.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("grad_check requires 64-bit parameters")
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        if flat.size <= n_coords:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=n_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data)
            flat[i] = orig - eps
            down = float(f().data)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            err = abs(a.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst
