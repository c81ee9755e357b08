"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from vtar.errors import NondeterministicFunctionError, ShapeError
from vtar.numerics.tensor import Graph, Tensor, backward, no_grad

Params = Union[Tensor, Sequence[Tensor]]


def _scalar(value: Tensor) -> float:
    if value.data.size != 1:
        raise ShapeError("grad_check: f must return a scalar", value.shape)
    return float(value.data.reshape(()))


def grad_check(
    f: Callable[..., Tensor],
    x: Params,
    eps: float = 1e-5,
    reference: Optional[Callable[..., Tensor]] = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is called with no arguments when ``x`` is a list (the closure reads
    the tensors) and with ``x`` itself when ``x`` is a single tensor. The error
    per coordinate is ``|analytic - fd| / max(1, |fd|)``.

    ``reference`` replaces ``f`` for the finite differences only; use it when
    ``f`` carries a custom backward rule (straight-through estimators) whose
    derivative is defined by a surrogate objective rather than by ``f``.
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"grad_check: eps must lie in (0, 1e-2], got {eps}")
    single = isinstance(x, Tensor)
    params = [x] if single else list(x)

    def call(fn):
        return fn(x) if single else fn()

    ref = reference or f
    saved = [(p.requires_grad, p.grad) for p in params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    try:
        with Graph():
            out = call(f)
            _scalar(out)
            backward(out)
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

        with no_grad():
            base1 = _scalar(call(ref))
            base2 = _scalar(call(ref))
            if base1 != base2:
                raise NondeterministicFunctionError(
                    f"grad_check: f(x) evaluated to {base1!r} then {base2!r}"
                )
            worst = 0.0
            for p, g in zip(params, analytic):
                flat = p.data.reshape(-1)
                gflat = g.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    fp = _scalar(call(ref))
                    flat[i] = orig - eps
                    fm = _scalar(call(ref))
                    flat[i] = orig
                    fd = (fp - fm) / (2.0 * eps)
                    err = abs(gflat[i] - fd) / max(1.0, abs(fd))
                    worst = max(worst, err)
    finally:
        for p, (rg, g) in zip(params, saved):
            p.requires_grad = rg
            p.grad = g
    return worst
