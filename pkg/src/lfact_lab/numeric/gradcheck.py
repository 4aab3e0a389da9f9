from __future__ import annotations

from typing import Callable, Hashable

import numpy as np

from .params import ParamStore
from .tensor import Tape, Tensor, backward


class GradCheckError(RuntimeError):
    pass


class HaltingFlipError(GradCheckError):
    """A perturbation changed a discrete halting decision."""


def _split(result) -> tuple[Tensor, Hashable]:
    if isinstance(result, tuple):
        return result
    return result, None


def grad_check(
    f: Callable[[ParamStore], Tensor | tuple[Tensor, Hashable]],
    params: ParamStore,
    step: float = 1e-5,
    analytic_hook: Callable[[dict[str, np.ndarray]], dict[str, np.ndarray]] | None = None,
) -> float:
    """Max relative error between backward() and central differences.

    The error at each coordinate is |a - n| / max(|a|, |n|, 1e-8).

    ``f`` returns a scalar tensor, or ``(scalar, key)`` where ``key`` must be
    identical at every perturbed point; models use it to pin halting
    decisions. ``analytic_hook`` lets a harness tamper with the analytic
    gradients to prove the check can fail.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"step {step} outside [1e-7, 1e-3]")
    with Tape() as tape:
        loss, ref = _split(f(params))
    grad_map = backward(tape, loss)
    analytic = {}
    for name, t in params.items():
        g = grad_map.get(t)
        analytic[name] = np.zeros(t.shape) if g is None else np.array(g.data)
    if analytic_hook is not None:
        analytic = analytic_hook(analytic)

    worst = 0.0
    for name, t in params.items():
        base = t.data
        for idx in np.ndindex(base.shape):
            vals = []
            for sign in (1.0, -1.0):
                arr = np.array(base)
                arr[idx] += sign * step
                loss, key = _split(f(params.replace(name, Tensor(arr))))
                if key != ref:
                    raise HaltingFlipError(f"halting pattern changed at {name}{list(idx)}")
                v = float(loss.data)
                if not np.isfinite(v):
                    raise GradCheckError(f"non-finite objective at {name}{list(idx)} ({'+' if sign > 0 else '-'}h)")
                vals.append(v)
            num = (vals[0] - vals[1]) / (2.0 * step)
            a = float(analytic[name][idx])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
