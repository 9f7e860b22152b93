"""Finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .tensor import CHECK_DTYPE, Tensor, no_grad


class GradCheckError(ValueError):
    pass


def relative_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)
    return np.abs(a - n) / denom


# A central difference cannot resolve changes below a few ulps of the output;
# that much disagreement is forgiven before the relative error is taken.
ROUNDOFF_ULPS = 16.0


def _same_branches(a, b) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y)
                                    for x, y in zip(a, b))


def grad_check(op: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               wrt: Optional[Sequence[Tensor]] = None, max_coords: Optional[int] = None,
               seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    ``op(*inputs)`` may return a tensor of any shape; it is reduced to a
    scalar with a fixed random projection so every output coordinate is
    exercised.  ``wrt`` defaults to ``inputs`` and may list extra tensors the
    op closes over (model parameters).  ``max_coords`` samples that many
    coordinates per tensor instead of sweeping them all.

    A coordinate whose +/-eps probes flip a relu sign or a max-pool choice
    sits on a kink, where the derivative is one-sided; it is skipped (and,
    when sampling, replaced by another coordinate).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise GradCheckError(f"eps {eps} outside [1e-7, 1e-3]")
    targets = list(inputs if wrt is None else wrt)
    for t in targets:
        if t.dtype != CHECK_DTYPE:
            raise GradCheckError("gradient checks require float64 tensors")
        if not np.all(np.isfinite(t.data)):
            raise GradCheckError(f"non-finite input {t.name or t.shape}")
        t.data = np.ascontiguousarray(t.data)

    rng = np.random.Generator(np.random.PCG64(seed))
    with no_grad():
        out = op(*inputs)
    proj = rng.standard_normal(out.shape)

    def probe():
        with no_grad(), ops.record_branches() as log:
            val = np.asarray(op(*inputs).data, dtype=np.float64)
        if not np.all(np.isfinite(val)):
            raise GradCheckError("non-finite output during finite differencing")
        return float((val * proj).sum()), log

    _, base_branches = probe()
    flags = [t.requires_grad for t in targets]
    for t in targets:
        t.requires_grad = True
        t.grad = None
    try:
        out = op(*inputs)
        if not np.all(np.isfinite(out.data)):
            raise GradCheckError("non-finite output")
        out.backward(proj.astype(out.dtype))
        worst = 0.0
        ulp = np.finfo(np.float64).eps
        for t in targets:
            analytic = (np.zeros(t.shape) if t.grad is None else t.grad).reshape(-1)
            flat = t.data.reshape(-1)
            if max_coords is not None and flat.size > max_coords:
                order, want = rng.permutation(flat.size), max_coords
            else:
                order, want = np.arange(flat.size), flat.size
            checked = 0
            for i in order:
                if checked >= want:
                    break
                orig = flat[i]
                flat[i] = orig + eps
                up, br_up = probe()
                flat[i] = orig - eps
                down, br_down = probe()
                flat[i] = orig
                if not (_same_branches(br_up, base_branches)
                        and _same_branches(br_down, base_branches)):
                    continue
                checked += 1
                numeric = (up - down) / (2 * eps)
                slack = ROUNDOFF_ULPS * ulp * max(abs(up), abs(down)) / eps
                diff = max(0.0, abs(analytic[i] - numeric) - slack)
                worst = max(worst, diff / max(abs(analytic[i]), abs(numeric), 1e-12))
            if flat.size and not checked:
                raise GradCheckError(f"every probed coordinate of {t.name or t.shape} sits on a kink")
        return float(worst)
    finally:
        for t, f in zip(targets, flags):
            t.requires_grad = f
            t.grad = None
