"""Finite-difference verification of reverse-mode gradients.

grad_check runs fn on float64 leaf tensors, backpropagates, then compares
every (or a seeded random subset of) analytic partial against a central
difference. The error measure is relative for large entries and absolute
below the `scale` floor, which keeps finite-difference roundoff noise on
near-zero partials from dominating.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from archseg.autodiff.tensor import Tensor


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    max_checks: int | None = None,
    rng: np.random.Generator | None = None,
    scale: float = 1e-2,
) -> float:
    """Max mismatch between reverse-mode and central-difference gradients.

    fn must map len(inputs) tensors to a scalar tensor. Returns
    max over checked entries of |a - n| / max(|a|, |n|, scale).
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    if out.value.size != 1:
        raise ValueError("grad_check needs a scalar-valued fn")
    if not np.isfinite(out.value).all():
        raise FloatingPointError("non-finite forward value")
    out.backward()
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.value) for t in leaves
    ]
    for g in analytic:
        if not np.isfinite(g).all():
            raise FloatingPointError("non-finite analytic gradient")

    def eval_at(mutated: list[np.ndarray]) -> float:
        res = fn(*[Tensor(a) for a in mutated])
        return float(res.value)

    worst = 0.0
    for i, base in enumerate(arrays):
        flat_n = base.size
        if max_checks is not None and flat_n > max_checks:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(flat_n, size=max_checks, replace=False)
        else:
            idxs = np.arange(flat_n)
        for j in idxs:
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i].flat[j] += eps
            minus[i].flat[j] -= eps
            numeric = (eval_at(plus) - eval_at(minus)) / (2.0 * eps)
            a = float(analytic[i].flat[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), scale)
            if err > worst:
                worst = err
    if not np.isfinite(worst):
        raise FloatingPointError("non-finite finite-difference result")
    return worst
