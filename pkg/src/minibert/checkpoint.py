"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      4 bytes  b"MBRT"
    version    u32
    config     u32 length + UTF-8 JSON (sorted keys)
    tensors    u32 count, then per tensor:
                 u16 name length, UTF-8 name
                 u8 dtype code (1 = float32, 2 = float64, 3 = int64)
                 u8 ndim, ndim x u64 dims
                 raw little-endian payload
    optimizer  u32 length + JSON header, then a tensor directory of moments
    rng        u32 length + UTF-8 JSON
    step       u64

The same tensor-directory encoding (with its own magic) is used by the
feature cache.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .model import ModelConfig, encoder_shapes

MAGIC = b"MBRT"
FORMAT_VERSION = 1

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Wrong magic bytes or undecodable block."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    """Stored tensor shapes disagree with the embedded model config."""


@dataclass
class OptimizerState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    hyper: dict = field(default_factory=dict)


@dataclass
class Checkpoint:
    config: ModelConfig
    weights: dict[str, np.ndarray]
    optimizer: OptimizerState = field(default_factory=OptimizerState)
    rng: dict = field(default_factory=dict)
    step: int = 0
    meta: dict = field(default_factory=dict)  # run config, head kind, labels, ...
    version: int = FORMAT_VERSION

    def copy(self) -> "Checkpoint":
        opt = OptimizerState(self.optimizer.t, {k: v.copy() for k, v in self.optimizer.m.items()},
                             {k: v.copy() for k, v in self.optimizer.v.items()}, dict(self.optimizer.hyper))
        return Checkpoint(self.config, {k: v.copy() for k, v in self.weights.items()}, opt,
                          json.loads(json.dumps(self.rng)), self.step, json.loads(json.dumps(self.meta)),
                          self.version)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        write_checkpoint(buf, self)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# low-level blocks
# ---------------------------------------------------------------------------
def _write_json(f: BinaryIO, obj) -> None:
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def write_tensor_directory(f: BinaryIO, tensors: dict[str, np.ndarray]) -> None:
    f.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name}")
        raw_name = name.encode("utf-8")
        f.write(struct.pack("<H", len(raw_name)))
        f.write(raw_name)
        f.write(struct.pack("<BB", code, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"file truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def json(self):
        (n,) = self.unpack("<I")
        raw = self.take(n)
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"corrupt JSON block: {exc}") from None

    def tensors(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<H")
            name = self.take(nlen).decode("utf-8")
            code, ndim = self.unpack("<BB")
            if code not in _DTYPES:
                raise CheckpointFormatError(f"unknown dtype code {code} for tensor {name}")
            shape = self.unpack(f"<{ndim}Q") if ndim else ()
            dt = _DTYPES[code]
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(self.take(n * dt.itemsize), dtype=dt).reshape(shape)
            out[name] = arr.astype(dt.newbyteorder("="), copy=True)
        return out


def read_magic(r: _Reader, magic: bytes) -> int:
    head = r.data[:4]
    if len(r.data) < 4 and magic.startswith(head):
        raise CheckpointTruncatedError("file shorter than the magic header")
    if head != magic:
        raise CheckpointFormatError(f"bad magic bytes {head!r}, expected {magic!r}")
    r.pos = 4
    (version,) = r.unpack("<I")
    return version


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------
def write_checkpoint(f: BinaryIO, ckpt: Checkpoint) -> None:
    f.write(MAGIC)
    f.write(struct.pack("<I", ckpt.version))
    _write_json(f, {"model": ckpt.config.to_dict(), "meta": ckpt.meta})
    write_tensor_directory(f, ckpt.weights)
    opt = ckpt.optimizer
    _write_json(f, {"t": opt.t, "hyper": opt.hyper})
    moments = {f"m/{k}": v for k, v in opt.m.items()}
    moments.update({f"v/{k}": v for k, v in opt.v.items()})
    write_tensor_directory(f, moments)
    _write_json(f, ckpt.rng)
    f.write(struct.pack("<Q", ckpt.step))


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    version = read_magic(r, MAGIC)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    header = r.json()
    try:
        config = ModelConfig.from_dict(header["model"])
    except Exception as exc:
        raise CheckpointFormatError(f"bad config block: {exc}") from None
    weights = r.tensors()
    opt_header = r.json()
    moments = r.tensors()
    m = {k[2:]: v for k, v in moments.items() if k.startswith("m/")}
    v = {k[2:]: v for k, v in moments.items() if k.startswith("v/")}
    rng = r.json()
    (step,) = r.unpack("<Q")
    if r.pos != len(data):
        raise CheckpointFormatError(f"{len(data) - r.pos} trailing bytes after checkpoint")
    for name, shape in encoder_shapes(config).items():
        if name not in weights:
            raise CheckpointShapeError(f"tensor {name} missing for the embedded config")
        if tuple(weights[name].shape) != shape:
            raise CheckpointShapeError(f"tensor {name} has shape {weights[name].shape}, config implies {shape}")
    opt = OptimizerState(opt_header.get("t", 0), m, v, opt_header.get("hyper", {}))
    return Checkpoint(config, weights, opt, rng, step, header.get("meta", {}), version)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            write_checkpoint(f, ckpt)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
