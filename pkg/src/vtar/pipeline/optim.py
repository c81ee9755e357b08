"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from vtar.errors import NonFiniteError, ShapeError
from vtar.numerics import Tensor


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamWState,
    cfg: AdamWConfig,
) -> tuple:
    """One update on plain arrays; returns ``(new_params, state)``.

    The bias-corrected Adam step is applied first, then the decay
    ``p <- p - lr * wd * p_old`` which does not pass through the moments.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adamw_step[{name}]", p.shape, g.shape)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"adamw_step: non-finite gradient for parameter {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - cfg.beta1) * g if m is None else cfg.beta1 * m + (1 - cfg.beta1) * g
        v = (1 - cfg.beta2) * g * g if v is None else cfg.beta2 * v + (1 - cfg.beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        with np.errstate(over="ignore", invalid="ignore"):
            out[name] = p - cfg.lr * update - cfg.lr * cfg.weight_decay * p
        if not np.isfinite(out[name]).all():
            raise NonFiniteError(f"adamw_step: update made parameter {name} non-finite")
    return out, state


class AdamW:
    """Applies :func:`adamw_step` in place to a dict of named tensors."""

    def __init__(self, params: Mapping[str, Tensor], cfg: AdamWConfig):
        self.params = dict(params)
        self.cfg = cfg
        self.state = AdamWState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        values = {n: p.data for n, p in self.params.items()}
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        new, self.state = adamw_step(values, grads, self.state, self.cfg)
        for n, p in self.params.items():
            p.data = np.asarray(new[n], dtype=np.float64)  # keeps 0-d tensors as arrays
