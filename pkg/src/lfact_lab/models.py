"""Uniform step interface over the three cell kinds (rnn, act, lfact)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .act import DEFAULT_EPSILON, ActParams, HaltingRecord, act_step
from .cells import GruParams, HeadOutput, HeadParams, gru_step, head_forward
from .lfact import COMBINERS, STRATEGIES, LfactParams, initial_trace, lfact_step
from .numeric import ParamStore, Rng, Tensor, const

KINDS = ("rnn", "act", "lfact")


@dataclass
class CellStep:
    state: object
    y: HeadOutput | None
    n: np.ndarray
    ponder: Tensor | None = None
    records: Callable[[], list[HaltingRecord]] | None = None
    # (intermediate output, mask of samples that computed it) per round
    intermediates: list[tuple[HeadOutput, np.ndarray]] = field(default_factory=list)


class RnnCell:
    """Plain single-layer GRU with an output head per step."""

    kind = "rnn"

    def __init__(self, input_dim, hidden, heads=1, classes=None, activation="softmax"):
        self.input_dim = input_dim
        self.hidden = hidden
        self.heads = heads
        self.classes = classes
        self.activation = activation
        self.max_layers = 1

    def init(self, store: ParamStore, prefix: str, rng: Rng) -> None:
        GruParams.init(store, prefix + "cell.", rng, self.input_dim, self.hidden)
        if self.classes is not None:
            HeadParams.init(store, prefix + "head.", rng, self.hidden, self.heads, self.classes)

    def bind(self, store: ParamStore, prefix: str = ""):
        head = HeadParams.from_store(store, prefix + "head.", self.heads, self.activation) if self.classes is not None else None
        return GruParams.from_store(store, prefix + "cell."), head

    def initial_state(self, bound, batch: int):
        return const(np.zeros((batch, self.hidden)))

    def step(self, bound, x: Tensor, state) -> CellStep:
        cell, head = bound
        u = gru_step(x, state, cell)
        y = head_forward(u, head) if head is not None else None
        return CellStep(u, y, np.ones(x.shape[0], dtype=np.int64))


class ActCell(RnnCell):
    kind = "act"

    def __init__(self, input_dim, hidden, heads=1, classes=None, activation="softmax", max_layers=3, epsilon=DEFAULT_EPSILON):
        super().__init__(input_dim, hidden, heads, classes, activation)
        self.max_layers = max_layers
        self.epsilon = epsilon

    def init(self, store, prefix, rng):
        ActParams.init(store, prefix, rng, self.input_dim, self.hidden, self.heads, self.classes)

    def bind(self, store, prefix=""):
        return ActParams.from_store(store, prefix, self.heads, self.activation)

    def step(self, bound, x, state) -> CellStep:
        s = act_step(x, state, bound, self.epsilon, self.max_layers)
        return CellStep(s.u, s.y, s.n.copy(), s.ponder, s.records)


class LfactCell(RnnCell):
    kind = "lfact"

    def __init__(
        self,
        input_dim,
        hidden,
        heads=1,
        classes=None,
        activation="softmax",
        max_layers=3,
        epsilon=DEFAULT_EPSILON,
        strategy="all",
        combiner="affine",
    ):
        super().__init__(input_dim, hidden, heads, classes, activation)
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}")
        if combiner not in COMBINERS:
            raise ValueError(f"unknown combiner {combiner!r}")
        self.max_layers = max_layers
        self.epsilon = epsilon
        self.strategy = strategy
        self.combiner = combiner

    def init(self, store, prefix, rng):
        LfactParams.init(store, prefix, rng, self.input_dim, self.hidden, self.heads, self.classes, self.max_layers, self.combiner)

    def bind(self, store, prefix=""):
        return LfactParams.from_store(store, prefix, self.heads, self.activation, self.combiner)

    def initial_state(self, bound, batch):
        return initial_trace(batch, self.hidden)

    def step(self, bound, x, state) -> CellStep:
        tr = lfact_step(x, state, bound, self.epsilon, self.max_layers, self.strategy)
        inter = list(zip(tr.outputs, tr.intermediate_masks()))
        return CellStep(tr, tr.y, tr.n.copy(), tr.ponder, tr.records, inter)


def build_cell(kind: str, input_dim: int, hidden: int, heads: int = 1, classes: int | None = None, **opts):
    """``opts``: max_layers, epsilon, strategy, combiner, activation (ignored where not applicable)."""
    activation = opts.get("activation", "softmax")
    if kind == "rnn":
        return RnnCell(input_dim, hidden, heads, classes, activation)
    if kind == "act":
        return ActCell(input_dim, hidden, heads, classes, activation, opts.get("max_layers", 3), opts.get("epsilon", DEFAULT_EPSILON))
    if kind == "lfact":
        return LfactCell(
            input_dim,
            hidden,
            heads,
            classes,
            activation,
            opts.get("max_layers", 3),
            opts.get("epsilon", DEFAULT_EPSILON),
            opts.get("strategy", "all"),
            opts.get("combiner", "affine"),
        )
    raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")
