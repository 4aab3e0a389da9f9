"""Adaptive Computation Time: halting schedule, mean-field step, ponder cost."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .cells import GruParams, HeadOutput, HeadParams, augment_flag, gru_input_proj, gru_step, head_forward
from .numeric import ParamStore, Rng, Tensor, const, glorot_init, reshape, sigmoid, transpose

DEFAULT_EPSILON = 0.01


@dataclass
class HaltingRecord:
    """Halting trace of one sample at one step."""

    h_values: list[float]
    n_t: int
    p: list[float]
    remainder: float

    def violations(self, epsilon: float, max_rounds: int) -> list[str]:
        """Broken invariants (empty when the record is well formed)."""
        bad = []
        if not 1 <= self.n_t <= max_rounds:
            bad.append(f"n_t={self.n_t} outside [1, {max_rounds}]")
        if not len(self.h_values) == len(self.p) == self.n_t:
            bad.append("h/p lengths differ from n_t")
            return bad
        if any(not 0.0 < h < 1.0 for h in self.h_values):
            bad.append("halting value outside (0, 1)")
        if abs(sum(self.p) - 1.0) > 1e-12:
            bad.append(f"sum(p)={sum(self.p)!r}")
        if any(pi != hi for pi, hi in zip(self.p[:-1], self.h_values[:-1])):
            bad.append("p differs from h before the final round")
        before = 0.0
        for h in self.h_values[:-1]:
            before += h
        if self.p[-1] != self.remainder or self.remainder != 1.0 - before:
            bad.append("final p is not the remainder")
        if not before < 1.0 - epsilon:
            bad.append("halted late: threshold already reached before the final round")
        if not self.remainder > epsilon:
            bad.append(f"remainder {self.remainder} <= epsilon")
        if not (before + self.h_values[-1] >= 1.0 - epsilon or self.n_t == max_rounds):
            bad.append("halted early: threshold not reached and n_t < L")
        return bad


def halt_schedule(
    h_stream: Callable[[int], float] | Sequence[float],
    epsilon: float = DEFAULT_EPSILON,
    max_rounds: int = 1,
) -> HaltingRecord:
    """Run rounds until the accumulated halting value reaches 1 - epsilon or L rounds.

    ``h_stream`` is called with the 1-based round index (a sequence is indexed
    instead). Only as many values as needed are requested.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if max_rounds < 1:
        raise ValueError(f"L must be >= 1, got {max_rounds}")
    get = h_stream if callable(h_stream) else (lambda n: h_stream[n - 1])
    hs: list[float] = []
    total = 0.0
    for n in range(1, max_rounds + 1):
        h = float(get(n))
        if not 0.0 < h < 1.0:
            raise ValueError(f"halting value {h} at round {n} is outside (0, 1)")
        hs.append(h)
        if total + h >= 1.0 - epsilon or n == max_rounds:
            remainder = 1.0 - total
            return HaltingRecord(hs, n, hs[:-1] + [remainder], remainder)
        total += h
    raise AssertionError("unreachable")


class BatchHalting:
    """Per-sample halting for a batch, round by round.

    Mirrors :func:`halt_schedule` exactly for each row: samples that have
    halted get p = 0 in later rounds, so extra rounds run for other samples
    leave their results untouched.
    """

    def __init__(self, batch: int, epsilon: float, max_rounds: int):
        if not 0.0 < epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
        self.epsilon = epsilon
        self.max_rounds = max_rounds
        self.round = 0
        self.active = np.ones(batch, dtype=bool)
        self.n = np.zeros(batch, dtype=np.int64)
        self._cum = np.zeros(batch)
        self._cum_t: Tensor = const(np.zeros((batch, 1)))
        self._final_rem: Tensor | None = None
        self.h_rows: list[np.ndarray] = []
        self.p_rows: list[np.ndarray] = []
        self.halt_masks: list[np.ndarray] = []
        self.active_masks: list[np.ndarray] = []

    def step(self, h: Tensor) -> Tensor:
        """Consume this round's halting values (B, 1); return p for the round (B, 1)."""
        self.round += 1
        hv = h.data.reshape(-1)
        active = self.active
        reached = self._cum + hv >= 1.0 - self.epsilon
        halt = active & (reached | (self.round == self.max_rounds))
        cont = active & ~halt
        halt_c = const(halt[:, None].astype(np.float64))
        cont_c = const(cont[:, None].astype(np.float64))

        remainder = 1.0 - self._cum_t
        p = h * cont_c + remainder * halt_c
        sel = remainder * halt_c
        self._final_rem = sel if self._final_rem is None else self._final_rem + sel
        self._cum_t = self._cum_t + h * cont_c
        self._cum = np.where(cont, self._cum + hv, self._cum)

        self.n[halt] = self.round
        self.active_masks.append(active.copy())
        self.halt_masks.append(halt)
        self.h_rows.append(np.where(active, hv, np.nan))
        self.p_rows.append(p.data.reshape(-1).copy())
        self.active = cont
        return p

    @property
    def done(self) -> bool:
        return not self.active.any()

    def ponder(self) -> Tensor:
        """n_t + remainder per sample, shape (B, 1); differentiable through the remainder."""
        return self._final_rem + const(self.n[:, None].astype(np.float64))

    def records(self) -> list[HaltingRecord]:
        out = []
        for b, n in enumerate(self.n):
            hs = [float(self.h_rows[i][b]) for i in range(n)]
            ps = [float(self.p_rows[i][b]) for i in range(n)]
            out.append(HaltingRecord(hs, int(n), ps, ps[-1]))
        return out


def mean_field(p: Sequence[Tensor], values: Sequence[Tensor]) -> Tensor:
    """Probability-weighted sum of per-round values."""
    acc = None
    for pi, v in zip(p, values):
        term = pi * v
        acc = term if acc is None else acc + term
    return acc


@dataclass
class ActParams:
    """GRU over the flag-augmented input, output head, halting unit (w_h: 1 x H, b_h: 1)."""

    cell: GruParams
    head: HeadParams | None
    w_h: Tensor
    b_h: Tensor
    _wht: Tensor | None = field(default=None, repr=False)

    def __post_init__(self):
        H = self.cell.hidden
        if self.w_h.shape != (1, H) or self.b_h.shape != (1,):
            raise ValueError(f"halting unit shapes {self.w_h.shape}/{self.b_h.shape} do not match hidden {H}")
        if self.head is not None and self.head.hidden != H:
            raise ValueError(f"head hidden {self.head.hidden} differs from cell hidden {H}")

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str = "", heads: int = 1, activation: str = "softmax") -> "ActParams":
        head = HeadParams.from_store(store, prefix + "head.", heads, activation) if prefix + "head.w" in store else None
        return cls(GruParams.from_store(store, prefix + "cell."), head, store[prefix + "halt.w"], store[prefix + "halt.b"])

    @staticmethod
    def init(store, prefix, rng: Rng, input_dim: int, hidden: int, heads: int, classes: int | None) -> None:
        GruParams.init(store, prefix + "cell.", rng, input_dim + 1, hidden)
        if classes is not None:
            HeadParams.init(store, prefix + "head.", rng, hidden, heads, classes)
        store.add(prefix + "halt.w", glorot_init(rng, 1, hidden))
        store.add(prefix + "halt.b", Tensor(np.zeros(1)))

    def wht(self) -> Tensor:
        if self._wht is None:
            self._wht = transpose(self.w_h)
        return self._wht


@dataclass
class ActStep:
    u: Tensor
    y: HeadOutput | None
    halting: BatchHalting
    states: list[Tensor]
    outputs: list[HeadOutput]

    @property
    def ponder(self) -> Tensor:
        return self.halting.ponder()

    @property
    def n(self) -> np.ndarray:
        return self.halting.n

    def records(self) -> list[HaltingRecord]:
        return self.halting.records()


def act_step(x: Tensor, u_prev: Tensor, params: ActParams, epsilon: float = DEFAULT_EPSILON, max_rounds: int = 1) -> ActStep:
    """One ACT step on a batch ``x`` (B, D) with previous state (B, H).

    Round 1 sees the flagged input and ``u_prev``; round n > 1 sees the
    unflagged-round input and the previous round's state. State and output
    are p-weighted averages over the rounds actually used.
    """
    batch = x.shape[0]
    halting = BatchHalting(batch, epsilon, max_rounds)
    proj_first = gru_input_proj(augment_flag(x, True), params.cell)
    proj_rest = None
    state = u_prev
    ps: list[Tensor] = []
    states: list[Tensor] = []
    outputs: list[HeadOutput] = []
    for n in range(1, max_rounds + 1):
        if n == 1:
            proj = proj_first
        else:
            if proj_rest is None:
                proj_rest = gru_input_proj(augment_flag(x, False), params.cell)
            proj = proj_rest
        state = gru_step(None, state, params.cell, x_proj=proj)
        h = sigmoid(state @ params.wht() + params.b_h)
        ps.append(halting.step(h))
        states.append(state)
        if params.head is not None:
            outputs.append(head_forward(state, params.head))
        if halting.done:
            break
    u = mean_field(ps, states)
    y = None
    if params.head is not None:
        pw = [reshape(p, (batch, 1, 1)) for p in ps]
        y = HeadOutput(params.head.activation, probs=mean_field(pw, [o.probs for o in outputs]))
    return ActStep(u, y, halting, states, outputs)


def ponder_cost(records: Sequence[HaltingRecord]) -> float:
    """Total ponder cost: sum over steps of n_t + remainder."""
    if not records:
        raise ValueError("ponder_cost needs at least one record")
    return sum(r.n_t + r.remainder for r in records)


def act_loss(task_loss, records: Sequence[HaltingRecord], tau: float):
    if tau < 0:
        raise ValueError("tau must be >= 0")
    return task_loss + tau * ponder_cost(records)
