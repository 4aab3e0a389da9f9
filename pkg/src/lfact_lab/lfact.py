"""Layer-flexible ACT cell.

Each round of a step acts as a layer. Layer n of step t starts from a
transmission state: an attention-weighted mix of the previous step's primary
states, queried by the most recent available primary state (the previous
layer's output in this step, or the previous step's deepest state for
layer 1). The step output is the deepest layer's output; there is no
mean-field average.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .act import DEFAULT_EPSILON, BatchHalting, HaltingRecord, act_loss
from .cells import GruParams, HeadOutput, HeadParams, gru_input_proj, gru_step, head_forward
from .numeric import (
    ParamStore,
    Rng,
    Tensor,
    concat,
    const,
    glorot_init,
    sigmoid,
    slice_,
    softmax,
    tanh,
    transpose,
)

STRATEGIES = ("ltd", "all")
COMBINERS = ("affine", "mlp")
MLP_DEPTH = 2


@dataclass
class CombinerParams:
    """g(transmission, prev_output).

    affine: sigmoid(W_1 t + W_2 q + b). mlp: the same affine map under tanh,
    then ``len(layers)`` dense H -> H layers, tanh between them and sigmoid last.
    """

    variant: str
    w1: Tensor
    w2: Tensor
    b: Tensor
    layers: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    _t: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.variant not in COMBINERS:
            raise ValueError(f"unknown combiner variant {self.variant!r}")
        if self.variant == "affine" and self.layers:
            raise ValueError("affine combiner has no extra layers")

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str, variant: str) -> "CombinerParams":
        layers = []
        i = 1
        while f"{prefix}l{i}.w" in store:
            layers.append((store[f"{prefix}l{i}.w"], store[f"{prefix}l{i}.b"]))
            i += 1
        return cls(variant, store[prefix + "w1"], store[prefix + "w2"], store[prefix + "b"], layers)

    @staticmethod
    def init(store, prefix, rng: Rng, hidden: int, variant: str, depth: int = MLP_DEPTH) -> None:
        if variant not in COMBINERS:
            raise ValueError(f"unknown combiner variant {variant!r}")
        store.add(prefix + "w1", glorot_init(rng, hidden, hidden))
        store.add(prefix + "w2", glorot_init(rng, hidden, hidden))
        store.add(prefix + "b", Tensor(np.zeros(hidden)))
        if variant == "mlp":
            for i in range(1, depth):
                store.add(f"{prefix}l{i}.w", glorot_init(rng, hidden, hidden))
                store.add(f"{prefix}l{i}.b", Tensor(np.zeros(hidden)))

    def transposed(self):
        if self._t is None:
            self._t = (transpose(self.w1), transpose(self.w2), [transpose(w) for w, _ in self.layers])
        return self._t


def combine_g(transmission: Tensor, prev_output: Tensor, params: CombinerParams, variant: str | None = None) -> Tensor:
    variant = params.variant if variant is None else variant
    if variant not in COMBINERS:
        raise ValueError(f"unknown combiner variant {variant!r}")
    w1t, w2t, lts = params.transposed()
    pre = transmission @ w1t + prev_output @ w2t + params.b
    if variant == "affine":
        return sigmoid(pre)
    if not params.layers:
        raise ValueError("mlp combiner needs at least one extra layer")
    z = tanh(pre)
    for i, ((_, b), wt) in enumerate(zip(params.layers, lts)):
        a = z @ wt + b
        z = sigmoid(a) if i == len(params.layers) - 1 else tanh(a)
    return z


@dataclass
class LfactParams:
    cell: GruParams
    head: HeadParams | None
    combiner: CombinerParams
    w_q: Tensor
    v_q: Tensor
    b_q: Tensor
    v: Tensor  # (L, H): one scoring vector per layer index
    w_h: Tensor
    v_h: Tensor
    b_h: Tensor
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        H = self.cell.hidden
        for name, want in (("w_q", (H, H)), ("v_q", (H, H)), ("b_q", (H,)), ("w_h", (1, H)), ("v_h", (1, H)), ("b_h", (1,))):
            if getattr(self, name).shape != want:
                raise ValueError(f"LFACT {name} has shape {getattr(self, name).shape}, expected {want}")
        if self.v.ndim != 2 or self.v.shape[1] != H:
            raise ValueError(f"LFACT v has shape {self.v.shape}, expected (L, {H})")

    @property
    def max_layers(self) -> int:
        return self.v.shape[0]

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str = "", heads: int = 1, activation: str = "softmax", combiner: str = "affine") -> "LfactParams":
        head = HeadParams.from_store(store, prefix + "head.", heads, activation) if prefix + "head.w" in store else None
        return cls(
            GruParams.from_store(store, prefix + "cell."),
            head,
            CombinerParams.from_store(store, prefix + "comb.", combiner),
            store[prefix + "attn.w_q"],
            store[prefix + "attn.v_q"],
            store[prefix + "attn.b_q"],
            store[prefix + "attn.v"],
            store[prefix + "halt.w"],
            store[prefix + "halt.v"],
            store[prefix + "halt.b"],
        )

    @staticmethod
    def init(store, prefix, rng: Rng, input_dim, hidden, heads, classes, max_layers, combiner="affine") -> None:
        GruParams.init(store, prefix + "cell.", rng, input_dim, hidden)
        if classes is not None:
            HeadParams.init(store, prefix + "head.", rng, hidden, heads, classes)
        CombinerParams.init(store, prefix + "comb.", rng, hidden, combiner)
        store.add(prefix + "attn.w_q", glorot_init(rng, hidden, hidden))
        store.add(prefix + "attn.v_q", glorot_init(rng, hidden, hidden))
        store.add(prefix + "attn.b_q", Tensor(np.zeros(hidden)))
        store.add(prefix + "attn.v", glorot_init(rng, max_layers, hidden))
        store.add(prefix + "halt.w", glorot_init(rng, 1, hidden))
        store.add(prefix + "halt.v", glorot_init(rng, 1, hidden))
        store.add(prefix + "halt.b", Tensor(np.zeros(1)))

    def _get(self, key, make):
        if key not in self._cache:
            self._cache[key] = make()
        return self._cache[key]

    def w_qt(self):
        return self._get("w_qt", lambda: transpose(self.w_q))

    def v_qt(self):
        return self._get("v_qt", lambda: transpose(self.v_q))

    def w_ht(self):
        return self._get("w_ht", lambda: transpose(self.w_h))

    def v_ht(self):
        return self._get("v_ht", lambda: transpose(self.v_h))

    def v_col(self, layer_n: int):
        return self._get(("v", layer_n), lambda: transpose(slice_(self.v, np.s_[layer_n - 1 : layer_n])))


def attention_count(n_prev: np.ndarray, layer_n: int, strategy: str) -> np.ndarray:
    """How many previous primaries layer ``layer_n`` may attend to, per sample."""
    if strategy == "ltd":
        return np.minimum(n_prev, layer_n)
    if strategy == "all":
        return np.asarray(n_prev).copy()
    raise ValueError(f"unknown strategy {strategy!r}")


def transmission_state(
    primaries: Sequence[Tensor],
    query: Tensor,
    layer_n: int,
    strategy: str,
    params: LfactParams,
    n_prev: np.ndarray | None = None,
    key_proj: dict | None = None,
) -> tuple[Tensor, Tensor]:
    """Attention over the previous step's primary states for layer ``layer_n``.

    ``primaries`` holds (B, H) tensors; ``n_prev`` (B,) says how many of them
    are real for each sample (default: all). Returns (transmission, alpha)
    where alpha is (B, c_max) with exact zeros outside each sample's range.
    ``key_proj`` caches V_Q u_i across layers of one step.
    """
    if not primaries:
        raise ValueError("transmission_state needs at least one primary state")
    if not 1 <= layer_n <= params.max_layers:
        raise ValueError(f"layer {layer_n} outside 1..{params.max_layers}")
    batch = query.shape[0]
    if n_prev is None:
        n_prev = np.full(batch, len(primaries), dtype=np.int64)
    count = attention_count(n_prev, layer_n, strategy)
    k = int(count.max())
    if k > len(primaries):
        raise ValueError(f"{k} primaries needed, {len(primaries)} available")
    if key_proj is None:
        key_proj = {}
    q_part = query @ params.w_qt() + params.b_q
    v_col = params.v_col(layer_n)
    scores = []
    for i in range(k):
        if i not in key_proj:
            key_proj[i] = primaries[i] @ params.v_qt()
        scores.append(sigmoid(q_part + key_proj[i]) @ v_col)
    beta = scores[0] if k == 1 else concat(scores, axis=1)
    mask = np.arange(k)[None, :] < count[:, None]
    alpha = softmax(beta, mask=mask)
    ubar = None
    for i in range(k):
        term = slice_(alpha, np.s_[:, i : i + 1]) * primaries[i]
        ubar = term if ubar is None else ubar + term
    return ubar, alpha


@dataclass
class StepTrace:
    """One LFACT step for a batch.

    ``primaries``/``outputs`` cover the rounds run for the batch; sample b
    uses the first ``n[b]`` of them.
    """

    primaries: list[Tensor]
    outputs: list[HeadOutput]
    transmission_used: list[Tensor]
    alphas: list[Tensor]
    n: np.ndarray
    deepest: Tensor
    y: HeadOutput | None = None
    halting: BatchHalting | None = None

    @property
    def ponder(self) -> Tensor:
        return self.halting.ponder()

    def records(self) -> list[HaltingRecord]:
        return self.halting.records()

    def intermediate_masks(self) -> list[np.ndarray]:
        """Per round, which samples actually computed it (round <= n_t)."""
        return self.halting.active_masks


def initial_trace(batch: int, hidden: int) -> StepTrace:
    zero = const(np.zeros((batch, hidden)))
    return StepTrace([zero], [], [], [], np.ones(batch, dtype=np.int64), zero)


def _select(masks: Sequence[np.ndarray], values: Sequence[Tensor]) -> Tensor:
    acc = None
    for m, v in zip(masks, values):
        mc = const(m.astype(np.float64).reshape((-1,) + (1,) * (v.ndim - 1)))
        term = mc * v
        acc = term if acc is None else acc + term
    return acc


def lfact_step(
    x: Tensor,
    prev: StepTrace,
    params: LfactParams,
    epsilon: float = DEFAULT_EPSILON,
    max_layers: int | None = None,
    strategy: str = "all",
) -> StepTrace:
    """Advance one step on a batch ``x`` (B, D). The input reaches every layer unflagged."""
    max_layers = params.max_layers if max_layers is None else max_layers
    if max_layers > params.max_layers:
        raise ValueError(f"L={max_layers} exceeds the {params.max_layers} layer scoring vectors")
    batch = x.shape[0]
    halting = BatchHalting(batch, epsilon, max_layers)
    proj = gru_input_proj(x, params.cell)
    key_proj: dict = {}
    query = prev.deepest
    primaries, outputs, used, alphas = [], [], [], []
    for n in range(1, max_layers + 1):
        ubar, alpha = transmission_state(prev.primaries, query, n, strategy, params, prev.n, key_proj)
        u_hat = combine_g(ubar, query, params.combiner)
        u = gru_step(None, u_hat, params.cell, x_proj=proj)
        h = sigmoid(u @ params.w_ht() + ubar @ params.v_ht() + params.b_h)
        halting.step(h)
        primaries.append(u)
        used.append(ubar)
        alphas.append(alpha)
        if params.head is not None:
            outputs.append(head_forward(u, params.head))
        query = u
        if halting.done:
            break
    masks = halting.halt_masks
    deepest = _select(masks, primaries)
    y = None
    if params.head is not None:
        y = HeadOutput(params.head.activation, logits=_select(masks, [o.logits for o in outputs]))
    return StepTrace(primaries, outputs, used, alphas, halting.n.copy(), deepest, y, halting)


def run_sequence(
    inputs: Sequence[Tensor],
    params: LfactParams,
    epsilon: float = DEFAULT_EPSILON,
    max_layers: int | None = None,
    strategy: str = "all",
    trace: StepTrace | None = None,
) -> tuple[list[StepTrace], list[HeadOutput]]:
    if not inputs:
        raise ValueError("run_sequence needs at least one input step")
    if trace is None:
        trace = initial_trace(inputs[0].shape[0], params.cell.hidden)
    traces = []
    for x in inputs:
        trace = lfact_step(x, trace, params, epsilon, max_layers, strategy)
        traces.append(trace)
    return traces, [t.y for t in traces]


def lfact_loss(task_loss, intermediate_losses: Sequence[Sequence[float]], records: Sequence[HaltingRecord], tau: float, mu: float):
    """ACT loss plus mu times every intermediate output's loss (rounds 1..n_t, all steps)."""
    if mu < 0:
        raise ValueError("mu must be >= 0")
    extra = 0.0
    for step in intermediate_losses:
        for v in step:
            extra = extra + v
    return act_loss(task_loss, records, tau) + mu * extra
