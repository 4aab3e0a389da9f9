"""GRU recurrence, output heads and the ACT round flag.

All functions accept a single vector (``(D,)``) or a batch of row vectors
(``(B, D)``); batches are the normal case inside the models.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numeric import (
    ParamStore,
    Rng,
    ShapeError,
    Tensor,
    concat,
    const,
    glorot_init,
    log,
    log_softmax,
    pick,
    reshape,
    sigmoid,
    softmax,
    sum_,
    tanh,
    transpose,
)

GRU_NAMES = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_c", "u_c", "b_c")


@dataclass
class GruParams:
    """Update/reset/candidate gate weights. ``w_*``: H x D, ``u_*``: H x H, ``b_*``: H.

    Build the view inside the tape that uses it: transposed weights are
    cached on first use.
    """

    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_c: Tensor
    u_c: Tensor
    b_c: Tensor
    _t: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        H, D = self.w_z.shape
        for name in GRU_NAMES:
            t = getattr(self, name)
            want = {"w": (H, D), "u": (H, H), "b": (H,)}[name[0]]
            if t.shape != want:
                raise ShapeError(f"GRU {name} has shape {t.shape}, expected {want}")

    @property
    def input_dim(self) -> int:
        return self.w_z.shape[1]

    @property
    def hidden(self) -> int:
        return self.w_z.shape[0]

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str) -> "GruParams":
        return cls(*(store[prefix + n] for n in GRU_NAMES))

    @staticmethod
    def init(store: ParamStore, prefix: str, rng: Rng, input_dim: int, hidden: int) -> None:
        for gate in "zrc":
            store.add(f"{prefix}w_{gate}", glorot_init(rng, hidden, input_dim))
            store.add(f"{prefix}u_{gate}", glorot_init(rng, hidden, hidden))
            store.add(f"{prefix}b_{gate}", Tensor(np.zeros(hidden)))

    def transposed(self):
        if self._t is None:
            self._t = tuple(transpose(getattr(self, n)) for n in ("w_z", "w_r", "w_c", "u_z", "u_r", "u_c"))
        return self._t


def gru_input_proj(x: Tensor, p: GruParams) -> tuple[Tensor, Tensor, Tensor]:
    """Input-side gate pre-activations; reusable across rounds with the same input."""
    if x.shape[-1] != p.input_dim:
        raise ShapeError(f"GRU input has shape {x.shape}, expected last dim {p.input_dim}")
    wz, wr, wc, _, _, _ = p.transposed()
    return x @ wz, x @ wr, x @ wc


def gru_step(x: Tensor | None, h: Tensor, p: GruParams, x_proj=None) -> Tensor:
    """One GRU update.

    z = s(W_z x + U_z h + b_z), r = s(W_r x + U_r h + b_r),
    c = tanh(W_c x + U_c (r*h) + b_c), h' = (1 - z)*h + z*c.
    """
    if h.shape[-1] != p.hidden:
        raise ShapeError(f"GRU state has shape {h.shape}, expected last dim {p.hidden}")
    xz, xr, xc = gru_input_proj(x, p) if x_proj is None else x_proj
    _, _, _, uz, ur, uc = p.transposed()
    z = sigmoid(xz + h @ uz + p.b_z)
    r = sigmoid(xr + h @ ur + p.b_r)
    c = tanh(xc + (r * h) @ uc + p.b_c)
    return (1.0 - z) * h + z * c


@dataclass
class HeadParams:
    """``heads`` independent output layers stacked row-wise.

    ``w``: (heads*classes) x H, ``b``: heads*classes.
    """

    w: Tensor
    b: Tensor
    heads: int
    activation: str = "softmax"
    _wt: Tensor | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if self.activation not in ("softmax", "sigmoid"):
            raise ValueError(f"unknown head activation {self.activation!r}")
        rows = self.w.shape[0]
        if rows % self.heads or self.b.shape != (rows,):
            raise ShapeError(f"head weights {self.w.shape} / bias {self.b.shape} do not split into {self.heads} heads")

    @property
    def classes(self) -> int:
        return self.w.shape[0] // self.heads

    @property
    def hidden(self) -> int:
        return self.w.shape[1]

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str, heads: int, activation: str = "softmax") -> "HeadParams":
        return cls(store[prefix + "w"], store[prefix + "b"], heads, activation)

    @staticmethod
    def init(store: ParamStore, prefix: str, rng: Rng, hidden: int, heads: int, classes: int) -> None:
        store.add(prefix + "w", glorot_init(rng, heads * classes, hidden))
        store.add(prefix + "b", Tensor(np.zeros(heads * classes)))

    def wt(self) -> Tensor:
        if self._wt is None:
            self._wt = transpose(self.w)
        return self._wt


class HeadOutput:
    """Per-head probability vectors, shape (..., heads, classes).

    Built either from logits (single head evaluation) or directly from
    probabilities (a mixture of outputs, as in ACT's mean-field output).
    """

    def __init__(self, activation: str, logits: Tensor | None = None, probs: Tensor | None = None):
        self.activation = activation
        self.logits = logits
        self._probs = probs
        self._logp = None

    @property
    def probs(self) -> Tensor:
        if self._probs is None:
            self._probs = softmax(self.logits) if self.activation == "softmax" else sigmoid(self.logits)
        return self._probs

    @property
    def logp(self) -> Tensor:
        """Log-probabilities (softmax heads only); log-sum-exp when logits are known."""
        if self._logp is None:
            if self.activation != "softmax":
                raise ValueError("logp is defined for softmax heads")
            self._logp = log_softmax(self.logits) if self.logits is not None else log(self._probs)
        return self._logp

    @property
    def shape(self):
        return (self.logits if self.logits is not None else self._probs).shape


def head_forward(u: Tensor, p: HeadParams) -> HeadOutput:
    if u.shape[-1] != p.hidden:
        raise ShapeError(f"head input has shape {u.shape}, expected last dim {p.hidden}")
    flat = u @ p.wt() + p.b
    logits = reshape(flat, u.shape[:-1] + (p.heads, p.classes))
    return HeadOutput(p.activation, logits=logits)


def task_loss(out: HeadOutput, targets: np.ndarray) -> Tensor:
    """Per-sample loss averaged over heads; ``targets`` has shape (B, heads).

    Softmax heads: cross-entropy. Sigmoid heads: binary cross-entropy against
    the one-hot target, summed over classes.
    Returns a (B, 1) tensor.
    """
    targets = np.asarray(targets, dtype=np.int64)
    heads = targets.shape[-1]
    if out.activation == "softmax":
        picked = pick(out.logp, targets)  # (B, heads)
    else:
        probs = out.probs
        onehot = np.zeros(probs.shape)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        ll = const(onehot) * log(probs) + const(1.0 - onehot) * log(1.0 - probs)
        picked = sum_(ll, axis=-1)
    return sum_(picked, axis=-1, keepdims=True) * (-1.0 / heads)


def augment_flag(x: Tensor, first_round: bool) -> Tensor:
    """Append one channel: 1.0 on the first round of a step, 0.0 afterwards."""
    flag = np.full(x.shape[:-1] + (1,), 1.0 if first_round else 0.0)
    return concat([x, const(flag)], axis=-1)
