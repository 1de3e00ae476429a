"""Binary checkpoint format.

Layout (all integers little-endian):

    b"TARC"                      magic
    u32 version                  currently 1
    u32 n, n bytes               ArchConfig as UTF-8 JSON
    table                        parameters
    table                        batch-norm running statistics ("<layer>.mean", "<layer>.var")
    u8 has_optimizer
      [u32 n, n bytes            optimizer config and step count as JSON
       table                     first moments
       table                     second moments]
    u32 crc                      zlib CRC-32 of every preceding byte

A table is ``u32 count`` followed by ``count`` records sorted by name:

    u32 name length, name bytes (UTF-8), u32 rank, rank x u32 extents,
    prod(extents) x f32 values (C order)

Floats are always stored as float32.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError, UnsupportedVersionError
from .model import ArchConfig, ModelParams
from .optim import Optimizer, OptimizerConfig
from .tensor import BNState, ParamStore, Tensor

MAGIC = b"TARC"
VERSION = 1
_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    model: ModelParams
    optimizer: Optimizer | None = None


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def _table(entries: dict[str, np.ndarray]) -> bytes:
    out = [_u32(len(entries))]
    for name in sorted(entries):
        arr = np.asarray(entries[name])
        raw = name.encode("utf-8")
        out.append(_u32(len(raw)) + raw + _u32(arr.ndim))
        out.extend(_u32(d) for d in arr.shape)
        out.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    return b"".join(out)


def _json_blob(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _u32(len(raw)) + raw


def _bn_entries(bn: dict[str, BNState]) -> dict[str, np.ndarray]:
    out = {}
    for k, s in bn.items():
        out[f"{k}.mean"] = s.mean
        out[f"{k}.var"] = s.var
    return out


def to_bytes(model: ModelParams, optimizer: Optimizer | None = None) -> bytes:
    parts = [MAGIC, _u32(VERSION), _json_blob(model.config.to_dict())]
    parts.append(_table({name: p.data for name, p in model.params.items()}))
    parts.append(_table(_bn_entries(model.bn)))
    if optimizer is None:
        parts.append(b"\x00")
    else:
        c = optimizer.config
        meta = {"kind": c.kind, "lr": c.lr, "beta1": c.beta1, "beta2": c.beta2, "eps": c.eps,
                "step_count": optimizer.step_count}
        parts += [b"\x01", _json_blob(meta), _table(optimizer.first_moment), _table(optimizer.second_moment)]
    body = b"".join(parts)
    return body + _u32(zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data = data
        self.pos = 0
        self.end = end

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise FormatError(f"truncated checkpoint while reading {what}", offset=self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def json(self, what: str):
        start = self.pos
        raw = self.take(self.u32(what), what)
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"malformed {what}: {e}", offset=start) from None

    def table(self, what: str) -> dict[str, np.ndarray]:
        out = {}
        for _ in range(self.u32(f"{what} count")):
            start = self.pos
            try:
                name = self.take(self.u32(f"{what} name length"), f"{what} name").decode("utf-8")
            except UnicodeDecodeError:
                raise FormatError(f"{what} name is not UTF-8", offset=start) from None
            rank = self.u32(f"rank of {name!r}")
            shape = tuple(self.u32(f"extent of {name!r}") for _ in range(rank))
            count = int(np.prod(shape, dtype=np.int64))
            raw = self.take(4 * count, f"values of {name!r}")
            if name in out:
                raise FormatError(f"duplicate {what} entry {name!r}", offset=start)
            out[name] = np.frombuffer(raw, dtype=_F32).astype(np.float32).reshape(shape)
        return out


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 12:
        raise FormatError(f"file too short for a checkpoint ({len(data)} bytes)", offset=0)
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", offset=0)
    stored = struct.unpack("<I", data[-4:])[0]
    actual = zlib.crc32(data[:-4])
    if stored != actual:
        raise ChecksumError(f"CRC-32 mismatch: stored {stored:08x}, computed {actual:08x}", offset=len(data) - 4)
    r = _Reader(data, len(data) - 4)
    r.pos = 4
    version = r.u32("version")
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} is not supported (this build reads {VERSION})", offset=4)
    start = r.pos
    try:
        config = ArchConfig.from_dict(r.json("architecture config"))
    except (TypeError, ValueError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"invalid architecture config: {e}", offset=start) from None
    params = ParamStore()
    for name, arr in r.table("parameter").items():
        params[name] = Tensor(arr, dtype=np.float32)
    bn_raw = r.table("batch-norm")
    bn = {}
    for key in sorted({k.rsplit(".", 1)[0] for k in bn_raw}):
        try:
            bn[key] = BNState(bn_raw[f"{key}.mean"], bn_raw[f"{key}.var"])
        except KeyError:
            raise FormatError(f"batch-norm layer {key!r} lacks mean or var", offset=r.pos) from None
    flag = r.take(1, "optimizer flag")[0]
    optimizer = None
    if flag == 1:
        meta = r.json("optimizer config")
        try:
            ocfg = OptimizerConfig(meta["kind"], meta["lr"], meta["beta1"], meta["beta2"], meta["eps"])
            steps = int(meta["step_count"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"invalid optimizer section: {e}", offset=r.pos) from None
        optimizer = Optimizer(ocfg, steps, r.table("first moment"), r.table("second moment"))
    elif flag != 0:
        raise FormatError(f"optimizer flag must be 0 or 1, got {flag}", offset=r.pos - 1)
    if r.pos != r.end:
        raise FormatError(f"{r.end - r.pos} unexpected trailing bytes before CRC", offset=r.pos)
    return Checkpoint(ModelParams(config, params, bn), optimizer)


def save_checkpoint(path: str | Path, model: ModelParams, optimizer: Optimizer | None = None) -> bytes:
    data = to_bytes(model, optimizer)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return data


def load_checkpoint(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
