"""Central finite-difference gradient checking (64-bit)."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import ShapeError, Tensor, use_dtype


def grad_check(f: Callable[..., Tensor], point, h: float = 1e-5,
               wrt: Sequence[Tensor] | None = None, max_coords: int | None = None,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps ``point`` (a Tensor, or a sequence of Tensors) to a scalar
    Tensor. The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``wrt`` restricts the check to a subset of tensors that ``f`` closes over
    (e.g. model parameters); by default every tensor in ``point`` is checked.
    ``max_coords`` caps the number of coordinates probed per tensor (a seeded
    random subset), which keeps checks on large parameter sets affordable.
    Arrays in ``point`` are copied, so the caller's data is never perturbed.
    """
    points = list(point) if isinstance(point, (list, tuple)) else [point]
    with use_dtype(np.float64):
        points = [p if isinstance(p, Tensor) and p.dtype == np.float64
                  else Tensor(np.array(p.data if isinstance(p, Tensor) else p, dtype=np.float64))
                  for p in points]
        targets = list(wrt) if wrt is not None else points
        for t in targets:
            if t.dtype != np.float64:
                raise TypeError("grad_check needs 64-bit tensors")
            t.requires_grad = True
            t.grad = None

        def evaluate() -> Tensor:
            out = f(*points)
            if out.data.size != 1:
                raise ShapeError(f"grad_check: f must return a scalar, got shape {out.shape}")
            return out

        evaluate().backward()
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in targets]

        rng = np.random.default_rng(seed)
        worst = 0.0
        for t, an in zip(targets, analytic):
            flat = t.data.reshape(-1)
            an_flat = an.reshape(-1)
            coords = range(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = evaluate().item()
                flat[i] = orig - h
                fm = evaluate().item()
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                err = abs(an_flat[i] - num) / max(1.0, abs(num))
                worst = max(worst, err)
        for t in targets:
            t.grad = None
    return worst
