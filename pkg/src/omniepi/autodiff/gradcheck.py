"""Central finite-difference check of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError
from .tensor import Tensor, backward, no_grad


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               wrt: Sequence[Tensor] = (), max_coords: int | None = None,
               seed: int = 0) -> float:
    """Return max |analytic - numeric| / max(1, |numeric|) over checked coordinates.

    ``f(x)`` builds a graph; a non-scalar output is contracted with a fixed
    random projection so every output element participates. Extra tensors in
    ``wrt`` (typically parameters) are checked as well. With ``max_coords``,
    a seeded random subset of coordinates per tensor is perturbed.
    """
    targets = [x, *wrt]
    for t in targets:
        if t.dtype != np.float64:
            raise ContractError("grad_check requires 64-bit tensors")
    rng = np.random.default_rng(seed)

    with no_grad():
        first = f(x).data.copy()
        if not np.array_equal(first, f(x).data):
            raise ContractError("grad_check: f is not deterministic")
    proj = np.ones_like(first) if first.size == 1 else rng.standard_normal(first.shape)

    def objective() -> float:
        with no_grad():
            return float(np.sum(f(x).data * proj))

    saved = [(t.requires_grad, t.grad) for t in targets]
    for t in targets:
        t.requires_grad = True
        t.grad = None
    out = f(x)
    loss = (out * Tensor(proj, dtype=np.float64)).sum()
    backward(loss, params=targets)
    analytic = [t.grad.copy() for t in targets]
    for t, (req, grad) in zip(targets, saved):
        t.requires_grad, t.grad = req, grad

    worst = 0.0
    for t, ga in zip(targets, analytic):
        flat = t.data.reshape(-1)
        if not np.shares_memory(flat, t.data):
            raise ContractError("grad_check needs contiguous tensors to perturb in place")
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        gflat = ga.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = objective()
            flat[i] = orig - eps
            fm = objective()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            worst = max(worst, abs(gflat[i] - num) / max(1.0, abs(num)))
    return worst
