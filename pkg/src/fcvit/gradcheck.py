"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, no_grad, record_branches


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], n_coords: int = 50,
                      seed: int = 0, rel_step: float = 1e-5, max_retries: int = 1000) -> float:
    """Compare backprop gradients of a scalar ``f()`` with central differences.

    ``f`` is re-evaluated after perturbing ``params`` in place. Coordinates
    are drawn uniformly over all parameter entries; the step for entry
    ``theta`` is ``rel_step * (1 + |theta|)``. A draw whose +/- evaluations
    take different :func:`~fcvit.tensor.maxout` branches sits on a kink and is
    replaced by a fresh draw.

    Returns:
        max over the checked coordinates of
        ``|analytic - numeric| / max(1, |numeric|)``.
    """
    params = list(params)
    if not params:
        raise ValueError("no parameters to check")
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("gradient checks run in float64 only")
        p.requires_grad = True
        p.grad = None

    loss = f()
    if loss.size != 1:
        raise ValueError("f must return a single-element tensor")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    sizes = np.array([p.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)

    def evaluate() -> tuple[float, list]:
        with no_grad(), record_branches() as log:
            value = f().item()
        if not np.isfinite(value):
            raise NonFiniteError("loss is not finite")
        return value, log

    worst = 0.0
    checked = retries = 0
    target = min(n_coords, total)
    while checked < target:
        flat = int(rng.integers(total))
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        p, idx = params[which], flat - offsets[which]
        theta = p.data.flat[idx]
        step = rel_step * (1.0 + abs(theta))
        p.data.flat[idx] = theta + step
        up, branches_up = evaluate()
        p.data.flat[idx] = theta - step
        down, branches_down = evaluate()
        p.data.flat[idx] = theta
        if not _same_branches(branches_up, branches_down):
            retries += 1
            if retries > max_retries:
                raise RuntimeError("too many coordinates fall on non-differentiable points")
            continue
        numeric = (up - down) / (2.0 * step)
        err = abs(analytic[which].flat[idx] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
        checked += 1
    return worst
