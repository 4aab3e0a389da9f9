"""Per-step prediction (rnn mode) and encoder-decoder composition over any cell kind."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cells import HeadOutput, task_loss
from .models import CellStep, build_cell
from .numeric import ParamStore, Rng, Tensor, const


@dataclass(frozen=True)
class Seq2SeqConfig:
    encoder_len: int
    decoder_len: int
    cell_kind: str = "lfact"

    def __post_init__(self):
        if self.encoder_len < 1:
            raise ValueError("encoder_len must be >= 1")
        if self.decoder_len < 0:
            raise ValueError("decoder_len must be >= 0")


def run_rnn_mode(cell, bound, inputs: list[Tensor], state=None) -> list[CellStep]:
    """Chain the cell over ``inputs``; each step carries its own prediction."""
    if not inputs:
        raise ValueError("run_rnn_mode needs at least one input step")
    if state is None:
        state = cell.initial_state(bound, inputs[0].shape[0])
    steps = []
    for x in inputs:
        s = cell.step(bound, x, state)
        steps.append(s)
        state = s.state
    return steps


def encode(cell, bound, inputs: list[Tensor]) -> tuple[object, list[CellStep]]:
    """Run the encoder chain; returns (final state, per-step results)."""
    steps = run_rnn_mode(cell, bound, inputs)
    return steps[-1].state, steps


def decode(cell, bound, state, last_gt: Tensor, steps: int) -> list[CellStep]:
    """Every decoder step receives the same input: the last ground truth."""
    if steps < 1:
        raise ValueError("decoder needs at least one step")
    out = []
    for _ in range(steps):
        s = cell.step(bound, last_gt, state)
        out.append(s)
        state = s.state
    return out


@dataclass
class SeqOutput:
    steps: list[CellStep]  # every step run (encoder then decoder in seq2seq mode)
    pred_steps: list[CellStep]  # the steps whose outputs are predictions

    @property
    def predictions(self) -> list[HeadOutput]:
        return [s.y for s in self.pred_steps]

    @property
    def n(self) -> np.ndarray:
        """(B, steps) computation time per sample and step."""
        return np.stack([s.n for s in self.steps], axis=1)

    def records(self, sample: int) -> list:
        return [s.records()[sample] for s in self.steps if s.records is not None]


class SequenceModel:
    """A cell kind plus a framing: per-step prediction or encoder-decoder.

    Parameter names carry no prefix in rnn mode; seq2seq uses ``enc.`` and
    ``dec.`` (the encoder has no output head).
    """

    def __init__(
        self,
        kind: str,
        input_dim: int,
        hidden: int,
        heads: int,
        classes: int,
        mode: str = "rnn",
        decoder_len: int = 0,
        **cell_opts,
    ):
        if mode not in ("rnn", "seq2seq"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "seq2seq" and decoder_len < 1:
            raise ValueError("seq2seq mode needs decoder_len >= 1")
        self.kind = kind
        self.mode = mode
        self.decoder_len = decoder_len
        self.input_dim = input_dim
        self.hidden = hidden
        self.heads = heads
        self.classes = classes
        self.cell_opts = cell_opts
        if mode == "rnn":
            self.cell = build_cell(kind, input_dim, hidden, heads, classes, **cell_opts)
        else:
            self.encoder = build_cell(kind, input_dim, hidden, heads, None, **cell_opts)
            self.decoder = build_cell(kind, input_dim, hidden, heads, classes, **cell_opts)

    @property
    def max_layers(self) -> int:
        c = self.cell if self.mode == "rnn" else self.decoder
        return c.max_layers

    def init_params(self, rng: Rng) -> ParamStore:
        store = ParamStore()
        if self.mode == "rnn":
            self.cell.init(store, "", rng)
        else:
            self.encoder.init(store, "enc.", rng)
            self.decoder.init(store, "dec.", rng)
        return store

    def forward(self, params: ParamStore, x: np.ndarray, last_gt: np.ndarray | None = None) -> SeqOutput:
        """``x``: (B, T, D) inputs; ``last_gt``: (B, D) decoder input (seq2seq only)."""
        xs = [const(x[:, t, :]) for t in range(x.shape[1])]
        if self.mode == "rnn":
            bound = self.cell.bind(params)
            steps = run_rnn_mode(self.cell, bound, xs)
            return SeqOutput(steps, steps)
        if last_gt is None:
            raise ValueError("seq2seq forward needs the last ground truth")
        enc_bound = self.encoder.bind(params, "enc.")
        dec_bound = self.decoder.bind(params, "dec.")
        state, enc_steps = encode(self.encoder, enc_bound, xs)
        dec_steps = decode(self.decoder, dec_bound, state, const(last_gt), self.decoder_len)
        return SeqOutput(enc_steps + dec_steps, dec_steps)

    def sample_losses(
        self,
        params: ParamStore,
        x: np.ndarray,
        targets: np.ndarray,
        tau: float,
        mu: float,
        last_gt: np.ndarray | None = None,
    ) -> tuple[Tensor, SeqOutput]:
        """Per-sample training loss (B, 1) averaged over predicted steps.

        Sum over predicted steps of the task loss, plus tau times the ponder
        cost of every step run, plus (lfact, rnn mode) mu times the task loss
        of each intermediate output up to the sample's n_t.
        """
        out = self.forward(params, x, last_gt)
        total = None
        for j, s in enumerate(out.pred_steps):
            term = task_loss(s.y, targets[:, j, :])
            total = term if total is None else total + term
        if self.kind != "rnn" and tau:
            ponder = None
            for s in out.steps:
                ponder = s.ponder if ponder is None else ponder + s.ponder
            total = total + tau * ponder
        if self.kind == "lfact" and self.mode == "rnn" and mu:
            extra = None
            for j, s in enumerate(out.pred_steps):
                for o, mask in s.intermediates:
                    term = const(mask[:, None].astype(np.float64)) * task_loss(o, targets[:, j, :])
                    extra = term if extra is None else extra + term
            total = total + mu * extra
        return total * (1.0 / len(out.pred_steps)), out
