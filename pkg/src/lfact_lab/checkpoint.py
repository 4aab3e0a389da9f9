"""Binary checkpoint format.

Layout (little endian)::

    "LFCK" | version u32 | config length u32 | config UTF-8 |
    tensor count u32 | tensors... | [state tensor count u32 | tensors...]

Each tensor: name length u16, UTF-8 name, rank u8, dims u64 each, then the
row-major fp64 payload. The optional state section carries the optimizer
moments (``adam.m.<param>``, ``adam.v.<param>``), scalars ``adam.step``,
``adam.lr``, ``adam.beta1``, ``adam.beta2``, ``adam.eps`` and
``best_metric``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numeric import ParamStore, Tensor
from .training import AdamState

MAGIC = b"LFCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    params: ParamStore
    opt: AdamState | None = None
    best_metric: float | None = None
    version: int = FORMAT_VERSION


def _tensor_bytes(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"tensor name too long: {name[:40]}...")
    arr = np.asarray(arr, dtype="<f8")
    parts = [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim)]
    parts += [struct.pack("<Q", d) for d in arr.shape]
    parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def _section(items: list[tuple[str, np.ndarray]]) -> bytes:
    return struct.pack("<I", len(items)) + b"".join(_tensor_bytes(n, a) for n, a in items)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    cfg = ckpt.config_text.encode("utf-8")
    out = [MAGIC, struct.pack("<I", ckpt.version), struct.pack("<I", len(cfg)), cfg]
    out.append(_section([(k, t.data) for k, t in ckpt.params.items()]))
    state: list[tuple[str, np.ndarray]] = []
    if ckpt.opt is not None:
        o = ckpt.opt
        for k in ckpt.params:
            if k in o.m:
                state.append((f"adam.m.{k}", o.m[k]))
                state.append((f"adam.v.{k}", o.v[k]))
        for key in ("step", "lr", "beta1", "beta2", "eps"):
            state.append((f"adam.{key}", np.array(float(getattr(o, key)))))
    if ckpt.best_metric is not None:
        state.append(("best_metric", np.array(float(ckpt.best_metric))))
    if state:
        out.append(_section(state))
    return b"".join(out)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        b = self.buf[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def at_end(self) -> bool:
        return self.pos == len(self.buf)

    def section(self) -> list[tuple[str, np.ndarray]]:
        count = self.unpack("<I")
        items = []
        for _ in range(count):
            name = self.take(self.unpack("<H")).decode("utf-8")
            rank = self.unpack("<B")
            dims = tuple(self.unpack("<Q") for _ in range(rank))
            size = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(self.take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
            items.append((name, arr))
        return items


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if len(buf) < 4 and MAGIC.startswith(buf):
        raise TruncatedCheckpointError(f"checkpoint truncated: {len(buf)} bytes")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {buf[:4]!r}, expected {MAGIC!r}")
    r.take(4)
    version = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    config = r.take(r.unpack("<I")).decode("utf-8")
    params = ParamStore({n: Tensor(a) for n, a in r.section()})
    opt = None
    best = None
    if not r.at_end():
        state = dict(r.section())
        if not r.at_end():
            raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after the state section")
        best = float(state.pop("best_metric")) if "best_metric" in state else None
        if "adam.step" in state:
            opt = AdamState(
                lr=float(state["adam.lr"]),
                beta1=float(state["adam.beta1"]),
                beta2=float(state["adam.beta2"]),
                eps=float(state["adam.eps"]),
                step=int(state["adam.step"]),
            )
            for k in params:
                if f"adam.m.{k}" in state:
                    opt.m[k] = state[f"adam.m.{k}"]
                    opt.v[k] = state[f"adam.v.{k}"]
    return Checkpoint(config, params, opt, best, version)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def check_compatible(expected: ParamStore, loaded: ParamStore) -> None:
    """Raise a dimension error naming both shapes when parameters disagree."""
    missing = [k for k in expected if k not in loaded]
    extra = [k for k in loaded if k not in expected]
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, t in expected.items():
        if loaded[k].shape != t.shape:
            raise CheckpointError(
                f"dimension mismatch for {k}: checkpoint has {loaded[k].shape}, model expects {t.shape}"
                f" (hidden size {loaded[k].shape[0]} vs {t.shape[0]})"
            )
