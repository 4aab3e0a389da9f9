"""Run configuration: flat ``dotted.key = value`` text, one key per line.

Blank lines and ``#`` comments are ignored. Keys not listed in ``KEYS`` are
rejected. Task-dependent defaults (L, tau, mu, seq_len) are filled in after
parsing.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .data import Dataset, gen_market_surrogate, gen_modsum, load_byte_corpus
from .numeric import Rng
from .seq2seq import SequenceModel


class ConfigError(ValueError):
    def __init__(self, key: str | None, message: str):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


def _choice(*options):
    def parse(s: str):
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s

    return parse


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise ValueError("must be >= 1")
    return v


def _nonneg_int(s: str) -> int:
    v = int(s)
    if v < 0:
        raise ValueError("must be >= 0")
    return v


def _nonneg_float(s: str) -> float:
    v = float(s)
    if not v >= 0:
        raise ValueError("must be >= 0")
    return v


def _epsilon(s: str) -> float:
    v = float(s)
    if not 0 < v < 1:
        raise ValueError("must lie in (0, 1)")
    return v


KEYS = {
    "model.kind": _choice("rnn", "act", "lfact"),
    "model.hidden": _positive_int,
    "model.max_layers": _positive_int,
    "model.epsilon": _epsilon,
    "model.strategy": _choice("ltd", "all"),
    "model.combiner": _choice("affine", "mlp"),
    "mode": _choice("rnn", "seq2seq"),
    "seq2seq.decoder_len": _positive_int,
    "loss.tau": _nonneg_float,
    "loss.mu": _nonneg_float,
    "optim.lr": _nonneg_float,
    "optim.batch": _positive_int,
    "data.task": _choice("bytes", "modsum", "market"),
    "data.path": str,
    "data.seq_len": _positive_int,
    "data.n_train": _positive_int,
    "data.n_val": _positive_int,
    "data.n_test": _positive_int,
    "train.epochs": _nonneg_int,
    "train.patience": _nonneg_int,
    "seed": _nonneg_int,
}

REQUIRED = ("model.kind", "data.task")

FIXED_DEFAULTS = {
    "model.hidden": 128,
    "model.epsilon": 0.01,
    "model.strategy": "all",
    "model.combiner": "affine",
    "mode": "rnn",
    "seq2seq.decoder_len": 10,
    "optim.lr": 0.0005,
    "optim.batch": 32,
    "data.n_train": 1000,
    "data.n_val": 200,
    "data.n_test": 200,
    "train.epochs": 10,
    "train.patience": 0,
    "seed": 0,
}

TASK_DEFAULTS = {
    "market": {"model.max_layers": 5, "loss.tau": 0.001, "loss.mu": 0.1, "data.seq_len": 20},
    "bytes": {"model.max_layers": 3, "loss.tau": 0.06, "loss.mu": 0.1, "data.seq_len": 50},
    "modsum": {"model.max_layers": 3, "loss.tau": 0.01, "loss.mu": 0.05, "data.seq_len": 20},
}


@dataclass(frozen=True)
class RunConfig:
    values: dict
    text: str

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)


def parse_pairs(text: str) -> dict:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(None, f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(key, f"unknown configuration key (line {lineno})")
        if key in raw:
            raise ConfigError(key, f"duplicate key (line {lineno})")
        try:
            raw[key] = KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(key, f"bad value {value!r}: {exc}") from None
    return raw


def parse_config(text: str, overrides: str | None = None) -> RunConfig:
    """Parse config text; ``overrides`` (same syntax) replaces individual keys."""
    values = parse_pairs(text)
    if overrides:
        values.update(parse_pairs(overrides))
    for key in REQUIRED:
        if key not in values:
            raise ConfigError(key, "required key missing")
    merged = dict(FIXED_DEFAULTS)
    merged.update(TASK_DEFAULTS[values["data.task"]])
    merged.update(values)
    if merged["data.task"] == "bytes" and "data.path" not in merged:
        raise ConfigError("data.path", "required for the bytes task")
    return RunConfig(merged, render_config(merged))


def load_config(path, overrides: str | None = None) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(None, f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, overrides)


def render_config(values: dict) -> str:
    return "".join(f"{k} = {values[k]}\n" for k in sorted(values))


def build_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Train/val/test splits, deterministic in ``seed``."""
    rng = Rng(cfg["seed"])
    data_rng = rng.spawn()
    task = cfg["data.task"]
    T = cfg["data.seq_len"]
    k = cfg["seq2seq.decoder_len"] if cfg["mode"] == "seq2seq" else 0
    counts = (cfg["data.n_train"], cfg["data.n_val"], cfg["data.n_test"])
    splits = ("train", "val", "test")
    if task == "bytes":
        return load_byte_corpus(cfg["data.path"], T, counts, data_rng, decoder_len=k)
    if task == "modsum":
        if k:
            raise ConfigError("mode", "modsum is defined for rnn mode only")
        return tuple(gen_modsum(data_rng.spawn(), n, T, s) for n, s in zip(counts, splits))
    return tuple(gen_market_surrogate(data_rng.spawn(), n, T, decoder_len=k, split=s) for n, s in zip(counts, splits))


def build_model(cfg: RunConfig, ds: Dataset) -> SequenceModel:
    return SequenceModel(
        cfg["model.kind"],
        ds.input_dim,
        cfg["model.hidden"],
        ds.heads,
        ds.n_classes,
        mode=cfg["mode"],
        decoder_len=cfg["seq2seq.decoder_len"] if cfg["mode"] == "seq2seq" else 0,
        max_layers=cfg["model.max_layers"],
        epsilon=cfg["model.epsilon"],
        strategy=cfg["model.strategy"],
        combiner=cfg["model.combiner"],
    )


def run_rngs(cfg: RunConfig) -> tuple[Rng, Rng]:
    """(init rng, shuffle rng), independent of the data stream."""
    rng = Rng(cfg["seed"])
    rng.spawn()  # data stream
    return rng.spawn(), rng.spawn()
