"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def relative_error(analytic: float, numeric: float) -> float:
    denom = max(abs(analytic), abs(numeric), 1e-8)
    return abs(analytic - numeric) / denom


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-4,
    max_coords: Optional[int] = None,
    seed: int = 0,
    analytic: Optional[Sequence[np.ndarray]] = None,
) -> float:
    """Return the worst relative error between backprop and central differences.

    ``f`` must rebuild its graph on each call and return a scalar tensor.
    When ``max_coords`` is given, that many (param, index) coordinates are
    sampled uniformly over all parameter entries; otherwise every entry is
    checked. ``analytic`` overrides the backprop gradients, which is how the
    checker is itself tested against planted faults.
    """
    for p in params:
        # perturbations below go through a flat view
        p.data = np.ascontiguousarray(p.data)
    if analytic is None:
        for p in params:
            p.grad = None
        backward(f())
        analytic = [
            p.grad if p.grad is not None else np.zeros_like(p.data) for p in params
        ]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if max_coords is not None and max_coords < len(coords):
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(picks)]

    worst = 0.0
    with no_grad():
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + h
            up = float(f().data)
            flat[j] = orig - h
            down = float(f().data)
            flat[j] = orig
            numeric = (up - down) / (2.0 * h)
            worst = max(worst, relative_error(float(analytic[i].reshape(-1)[j]), numeric))
    return worst


def tensorwise_errors(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-4,
    coords_per_param: int = 8,
    seed: int = 0,
) -> list[float]:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)`` per parameter tensor.

    Up to ``coords_per_param`` entries of each tensor are sampled and the
    analytic and central-difference gradients over those entries are compared
    as vectors. Unlike the entrywise check, an entry whose gradient sits
    at the round-off floor of the step is judged against the scale of its
    tensor rather than against itself.
    """
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        p.grad = None
    backward(f())
    rng = np.random.default_rng(seed)
    errors = []
    with no_grad():
        for p in params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            idx = rng.choice(p.size, size=min(coords_per_param, p.size), replace=False)
            flat = p.data.reshape(-1)
            a = g.reshape(-1)[idx]
            n = np.empty(len(idx))
            for k, j in enumerate(idx):
                orig = flat[j]
                flat[j] = orig + h
                up = float(f().data)
                flat[j] = orig - h
                down = float(f().data)
                flat[j] = orig
                n[k] = (up - down) / (2.0 * h)
            denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
            errors.append(float(np.linalg.norm(a - n) / denom))
    return errors
