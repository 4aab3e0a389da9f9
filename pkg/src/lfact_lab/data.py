"""Byte corpora and synthetic sequence tasks.

Three tasks:

* ``bytes``: windows of a raw byte file, one-hot(256) inputs, next-byte targets.
* ``modsum``: digits with a piecewise-constant difficulty d in {1, 3, 5};
  the target is the sum of the last d digits mod 10.
* ``market``: 22 AR(1) return channels; each step predicts, per channel, a
  5-way bucket of the next standardised return.

Integer-coded inputs (bytes) are stored as codes and expanded to one-hot per
batch; the others are stored dense.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numeric import Rng

BYTE_VOCAB = 256
MODSUM_SEGMENT = 5
MODSUM_DIFFICULTIES = (1, 3, 5)
MARKET_CHANNELS = 22
MARKET_CLASSES = 5
MARKET_AR = 0.3
MARKET_BOUNDARIES = (-2.0, -1.0, 1.0, 2.0)


@dataclass
class Batch:
    x: np.ndarray  # (B, T, D)
    targets: np.ndarray  # (B, T_pred, heads)
    last_gt: np.ndarray | None = None  # (B, D), seq2seq only


@dataclass
class Dataset:
    task: str
    split: str
    inputs: np.ndarray  # (N, T, D) float, or (N, T) codes when vocab is set
    targets: np.ndarray  # (N, T_pred, heads) int
    n_classes: int
    vocab: int | None = None
    last_gt: np.ndarray | None = None  # (N, D) float or (N,) codes
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.targets.ndim != 3:
            raise ValueError(f"targets must be (N, T, heads), got {self.targets.shape}")
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets disagree on sample count")
        if self.last_gt is None and self.inputs.shape[1] != self.targets.shape[1]:
            raise ValueError("rnn-mode samples need one target per input step")
        if self.targets.size and (self.targets.min() < 0 or self.targets.max() >= self.n_classes):
            raise ValueError("class index out of range")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def input_dim(self) -> int:
        return self.vocab if self.vocab is not None else self.inputs.shape[2]

    @property
    def heads(self) -> int:
        return self.targets.shape[2]

    @property
    def seq_len(self) -> int:
        return self.inputs.shape[1]

    @property
    def decoder_len(self) -> int:
        return 0 if self.last_gt is None else self.targets.shape[1]

    def _expand(self, a: np.ndarray) -> np.ndarray:
        if self.vocab is None:
            return np.asarray(a, dtype=np.float64)
        return np.eye(self.vocab)[a]

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx, dtype=np.int64)
        gt = None if self.last_gt is None else self._expand(self.last_gt[idx])
        return Batch(self._expand(self.inputs[idx]), self.targets[idx], gt)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.task,
            self.split,
            self.inputs[idx],
            self.targets[idx],
            self.n_classes,
            self.vocab,
            None if self.last_gt is None else self.last_gt[idx],
            {k: (v[idx] if isinstance(v, np.ndarray) and len(v) == len(self) else v) for k, v in self.meta.items()},
        )


def load_byte_corpus(
    path,
    seq_len: int,
    counts: tuple[int, int, int],
    rng: Rng,
    decoder_len: int = 0,
) -> tuple[Dataset, Dataset, Dataset]:
    """Disjoint random non-overlapping windows of ``seq_len + 1`` bytes.

    With ``decoder_len = k > 0`` windows hold seq_len + 1 + k bytes: the
    encoder reads the first seq_len, the next byte is the last ground truth,
    and the k after it are decoder targets.
    """
    data = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    width = seq_len + 1 + decoder_len
    need = width * sum(counts)
    if len(data) < need:
        raise ValueError(f"corpus {path} has {len(data)} bytes; {need} required for {sum(counts)} windows of {width}")
    n_windows = len(data) // width
    chosen = rng.sample(n_windows, sum(counts))
    out = []
    start = 0
    for split, c in zip(("train", "val", "test"), counts):
        win = chosen[start : start + c]
        start += c
        offsets = win[:, None] * width + np.arange(width)[None, :]
        block = data[offsets].astype(np.int64) if c else np.zeros((0, width), dtype=np.int64)
        if decoder_len:
            inputs = block[:, :seq_len]
            last_gt = block[:, seq_len]
            targets = block[:, seq_len + 1 :, None]
        else:
            inputs = block[:, :seq_len]
            last_gt = None
            targets = block[:, 1:, None]
        out.append(
            Dataset("bytes", split, inputs, targets, BYTE_VOCAB, vocab=BYTE_VOCAB, last_gt=last_gt, meta={"window_index": win})
        )
    return tuple(out)


def modsum_targets(digits: np.ndarray, difficulty: np.ndarray) -> np.ndarray:
    """Sum of the last d_t digits (window clipped at the sequence start) mod 10."""
    T = len(digits)
    out = np.empty(T, dtype=np.int64)
    for t in range(T):
        lo = max(0, t - int(difficulty[t]) + 1)
        out[t] = int(digits[lo : t + 1].sum()) % 10
    return out


def gen_modsum(rng: Rng, n_samples: int, seq_len: int, split: str = "train") -> Dataset:
    """Inputs: one-hot digit (10 channels) plus the raw difficulty value (1 channel)."""
    if seq_len < MODSUM_SEGMENT:
        raise ValueError(f"seq_len must be >= {MODSUM_SEGMENT}")
    inputs = np.zeros((n_samples, seq_len, 11))
    targets = np.zeros((n_samples, seq_len, 1), dtype=np.int64)
    digits_all = np.zeros((n_samples, seq_len), dtype=np.int64)
    diff_all = np.zeros((n_samples, seq_len), dtype=np.int64)
    for i in range(n_samples):
        digits = np.array([rng.integers(10) for _ in range(seq_len)], dtype=np.int64)
        diff = np.empty(seq_len, dtype=np.int64)
        for s in range(0, seq_len, MODSUM_SEGMENT):
            diff[s : s + MODSUM_SEGMENT] = MODSUM_DIFFICULTIES[rng.integers(len(MODSUM_DIFFICULTIES))]
        inputs[i, np.arange(seq_len), digits] = 1.0
        inputs[i, :, 10] = diff
        targets[i, :, 0] = modsum_targets(digits, diff)
        digits_all[i] = digits
        diff_all[i] = diff
    return Dataset("modsum", split, inputs, targets, 10, meta={"digits": digits_all, "difficulty": diff_all})


def market_bucket(z) -> np.ndarray:
    """5-way class of a standardised return: (-inf,-2], (-2,-1], (-1,1], (1,2], (2,inf)."""
    return np.searchsorted(MARKET_BOUNDARIES, np.asarray(z, dtype=np.float64), side="left")


def market_sigma(ar: float = MARKET_AR) -> float:
    """Stationary standard deviation of r_t = ar * r_{t-1} + N(0, 1)."""
    return 1.0 / math.sqrt(1.0 - ar * ar)


def gen_market_surrogate(
    rng: Rng,
    n_samples: int,
    seq_len: int,
    channels: int = MARKET_CHANNELS,
    decoder_len: int = 0,
    split: str = "train",
) -> Dataset:
    """Per-channel AR(1) returns started from the stationary distribution.

    Inputs are the raw returns of all channels at each step. In rnn mode the
    label of step t is the bucket of r_{t+1} / sigma per channel. With
    ``decoder_len = k`` the encoder reads r_1..r_T, the decoder input is
    r_{T+1} and the targets are buckets of r_{T+2}..r_{T+1+k}.
    """
    if channels < 1:
        raise ValueError("channels must be >= 1")
    sigma = market_sigma()
    length = seq_len + 1 + decoder_len
    eta = rng.normal(size=(n_samples, length, channels))
    r = np.empty_like(eta)
    r[:, 0] = sigma * eta[:, 0]
    for t in range(1, length):
        r[:, t] = MARKET_AR * r[:, t - 1] + eta[:, t]
    labels = market_bucket(r / sigma)
    inputs = r[:, :seq_len]
    if decoder_len:
        return Dataset("market", split, inputs, labels[:, seq_len + 1 :], MARKET_CLASSES, last_gt=r[:, seq_len], meta={"returns": r})
    return Dataset("market", split, inputs, labels[:, 1:], MARKET_CLASSES, meta={"returns": r})


def export_dataset(ds: Dataset, path) -> None:
    """One record per line, tab-separated fields, comma-separated sequences.

    modsum: ``id  digits  difficulty  targets``.
    other tasks: ``id  inputs  targets [last_gt]`` with steps separated by
    ';' and the channels (or heads) of a step by ','.
    """
    lines = []
    for i in range(len(ds)):
        if ds.task == "modsum":
            fields = [
                str(i),
                ",".join(str(int(v)) for v in ds.meta["digits"][i]),
                ",".join(str(int(v)) for v in ds.meta["difficulty"][i]),
                ",".join(str(int(v)) for v in ds.targets[i, :, 0]),
            ]
        else:
            if ds.vocab is not None:
                inp = ",".join(str(int(v)) for v in ds.inputs[i])
            else:
                inp = ";".join(",".join(repr(float(v)) for v in step) for step in ds.inputs[i])
            tgt = ";".join(",".join(str(int(v)) for v in step) for step in ds.targets[i])
            fields = [str(i), inp, tgt]
            if ds.last_gt is not None:
                g = ds.last_gt[i]
                fields.append(",".join(repr(float(v)) for v in np.atleast_1d(g)))
        lines.append("\t".join(fields))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
