"""Adam / AdamW with a linearly decaying learning rate.

Weight decay is decoupled (applied directly to the parameter, scaled by
the current learning rate) and only in AdamW; plain Adam ignores the decay
setting so a zero-gradient parameter never moves under it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from archseg.autodiff.params import ParamSet


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"  # "adam" | "adamw"
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    total_iters: int = 1000
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.kind not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if self.lr0 <= 0 or self.total_iters <= 0:
            raise ValueError("lr0 and total_iters must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


def lr_at(cfg: OptimizerConfig, t: int) -> float:
    """Linear decay lr0 * (1 - t/T); t past T is a scheduling bug."""
    if t > cfg.total_iters:
        raise ValueError(f"iteration {t} exceeds total_iters {cfg.total_iters}")
    return cfg.lr0 * (1.0 - t / cfg.total_iters)


def step(ps: ParamSet, cfg: OptimizerConfig, t: int) -> None:
    """One bias-corrected Adam/AdamW update at iteration t (0-based)."""
    lr = lr_at(cfg, t)
    bc1 = 1.0 - cfg.beta1 ** (t + 1)
    bc2 = 1.0 - cfg.beta2 ** (t + 1)
    for name, p in zip(ps.names(), ps.parameters()):
        state = ps.opt_state.get(name)
        if state is None:
            state = {
                "m": np.zeros_like(p.value),
                "v": np.zeros_like(p.value),
            }
            ps.opt_state[name] = state
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        m, v = state["m"], state["v"]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if cfg.kind == "adamw" and cfg.weight_decay > 0.0:
            update = update + lr * cfg.weight_decay * p.value
        p.value -= update.astype(p.value.dtype)
