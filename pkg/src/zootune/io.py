"""ZOOC checkpoints, temporal-ensemble files and CSV exports.

ZOOC layout (all integers little-endian)::

    b"ZOOC"  u32 version (=1)
    u32 n_meta, then n_meta x (u32 len + UTF-8 key, u32 len + UTF-8 value)
    u32 n_tensors, then per tensor:
        u16 len + UTF-8 name, u8 dtype (0 = float32, 1 = float64),
        u8 ndim, ndim x u32 dims, raw values
"""

from __future__ import annotations

import csv
import os
import struct
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import FormatError, IntegrityError, LengthError
from .layers import TEState

MAGIC = b"ZOOC"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class SourceCheckpoint:
    metadata: dict[str, str] = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    @property
    def digest(self) -> str | None:
        return self.metadata.get("digest")

    def equals(self, other: "SourceCheckpoint") -> bool:
        """Bitwise equality of metadata, names, dtypes, shapes and values."""
        if self.version != other.version or self.metadata != other.metadata:
            return False
        if list(self.tensors) != list(other.tensors):
            return False
        for k, a in self.tensors.items():
            b = other.tensors[k]
            if a.dtype != b.dtype or a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return True


@contextmanager
def atomic_write(path, mode: str = "wb") -> Iterator:
    """Write to a temporary file next to ``path`` and rename it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        newline = "" if "b" not in mode else None
        with os.fdopen(fd, mode, newline=newline) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(ckpt: SourceCheckpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", ckpt.version), struct.pack("<I", len(ckpt.metadata))]
    for key, value in ckpt.metadata.items():
        for s in (str(key), str(value)):
            b = s.encode("utf-8")
            parts.append(struct.pack("<I", len(b)) + b)
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise LengthError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(raw: bytes) -> SourceCheckpoint:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (n_meta,) = r.unpack("<I")
    meta = {}
    for _ in range(n_meta):
        (klen,) = r.unpack("<I")
        key = r.take(klen).decode("utf-8")
        (vlen,) = r.unpack("<I")
        if key in meta:
            raise IntegrityError(f"duplicate metadata key {key!r}")
        meta[key] = r.take(vlen).decode("utf-8")
    (n_tensors,) = r.unpack("<I")
    tensors = {}
    for _ in range(n_tensors):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise FormatError(f"{name}: unknown dtype code {code}")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        dt = _CODE_DTYPES[code]
        count = int(np.prod(dims)) if ndim else 1
        data = r.take(count * dt.itemsize)
        if name in tensors:
            raise IntegrityError(f"duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(data, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(raw):
        raise FormatError(f"{len(raw) - r.pos} trailing bytes after last tensor")
    return SourceCheckpoint(meta, tensors, version)


def save_checkpoint(ckpt: SourceCheckpoint, path) -> None:
    data = encode_checkpoint(ckpt)
    with atomic_write(path) as fh:
        fh.write(data)


def load_checkpoint(path) -> SourceCheckpoint:
    return decode_checkpoint(Path(path).read_bytes())


def read_digest(path) -> str | None:
    """Backbone digest from the metadata block, without decoding any tensor."""
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12 or head[:4] != MAGIC:
            raise FormatError(f"{path}: not a ZOOC checkpoint")
        (n_meta,) = struct.unpack("<I", head[8:12])
        for _ in range(n_meta):
            pair = []
            for _ in range(2):
                raw = fh.read(4)
                if len(raw) < 4:
                    raise LengthError(f"{path}: metadata truncated")
                (n,) = struct.unpack("<I", raw)
                pair.append(fh.read(n).decode("utf-8"))
            if pair[0] == "digest":
                return pair[1]
    return None


def te_to_checkpoint(te: TEState) -> SourceCheckpoint:
    meta = {"kind": "te", "decay": repr(float(te.decay))}
    return SourceCheckpoint(meta, {f"te.{k}": np.asarray(v, dtype=np.float64) for k, v in te.values.items()})


def te_from_checkpoint(ckpt: SourceCheckpoint) -> TEState:
    if ckpt.metadata.get("kind") != "te":
        raise FormatError("checkpoint does not hold a temporal ensemble")
    values = {k[3:]: v.copy() for k, v in ckpt.tensors.items() if k.startswith("te.")}
    return TEState(decay=float(ckpt.metadata["decay"]), values=values)


# ---------------------------------------------------------------------------
# CSV

GATES_HEADER = ("iteration", "layer", "source", "gate_mean")
RUN_HEADER = ("iteration", "train_loss", "eval_metric")


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_gates_csv(record, path) -> None:
    """One row per (iteration, layer, source) batch-mean gate value."""
    if not record.gate_trace:
        raise ValueError("run record holds no gate values")
    with atomic_write(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GATES_HEADER)
        for it, layers in record.gate_trace:
            for layer, means in layers.items():
                for i, v in enumerate(means):
                    w.writerow((it, layer, i, _fmt(v)))


def write_run_csv(record, path) -> None:
    if not record.points:
        raise ValueError("run record holds no evaluation points")
    with atomic_write(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUN_HEADER)
        for p in record.points:
            w.writerow((p.iteration, _fmt(p.train_loss), "" if p.eval_metric is None else _fmt(p.eval_metric)))


def read_gates_csv(path) -> list[tuple[int, str, int, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != GATES_HEADER:
        raise FormatError(f"{path}: bad gates CSV header")
    return [(int(a), b, int(c), float(d)) for a, b, c, d in rows[1:]]


def read_run_csv(path) -> list[tuple[int, float, float | None]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != RUN_HEADER:
        raise FormatError(f"{path}: bad run CSV header")
    return [(int(a), float(b), float(c) if c else None) for a, b, c in rows[1:]]


def write_rows_csv(path, header, rows) -> None:
    with atomic_write(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
