"""
RLYT checkpoint format, little-endian throughout:

    b"RLYT" | u32 version
    u32 n  | n bytes UTF-8 metadata, one key=value per line
    u32 tensor count, then per tensor:
        u16 name length | name (UTF-8) | u8 dtype code | u8 rank
        rank x u64 extents | raw little-endian payload

Entries are kept in file order, so load -> save is byte-identical.
"""
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

from src.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"RLYT"
VERSION = 1

DTYPE_CODES = {1: "<f4", 2: "<f8", 3: "<i8", 4: "|u1"}
CODE_OF = {np.dtype(v).newbyteorder("="): k for k, v in DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    meta: Dict[str, str] = field(default_factory=OrderedDict)
    tensors: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    version: int = VERSION


def _code(name: str, array: np.ndarray) -> int:
    dtype = array.dtype.newbyteorder("=")
    if dtype not in CODE_OF:
        raise CheckpointError(f"tensor {name}: unsupported dtype {array.dtype}")
    return CODE_OF[dtype]


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", ckpt.version)]
    lines = []
    for key, value in ckpt.meta.items():
        key, value = str(key), str(value)
        if "=" in key or "\n" in key or "\n" in value:
            raise CheckpointError(f"metadata entry {key!r} cannot be stored as one key=value line")
        lines.append(f"{key}={value}\n")
    meta = "".join(lines).encode("utf-8")
    parts += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for name, array in ckpt.tensors.items():
        array = np.asarray(array)
        code = _code(name, array)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", code, array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not an RLYT checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (meta_len,) = r.unpack("<I")
    try:
        text = r.take(meta_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError("checkpoint metadata is not UTF-8") from exc
    meta: Dict[str, str] = OrderedDict()
    for line in text.split("\n")[:-1] if text else []:
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed metadata line {line!r}")
        meta[key] = value

    tensors: Dict[str, np.ndarray] = OrderedDict()
    (count,) = r.unpack("<I")
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in DTYPE_CODES:
            raise CheckpointError(f"tensor {name}: unknown dtype code {code}")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        dtype = np.dtype(DTYPE_CODES[code])
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        array = np.frombuffer(r.take(size), dtype=dtype).reshape(shape)
        tensors[name] = array.astype(dtype.newbyteorder("="), copy=True)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the tensor table")
    return Checkpoint(meta=meta, tensors=tensors, version=version)


def save_checkpoint(path: Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode(ckpt)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)
    logger.info(f"Saved checkpoint {path} ({len(ckpt.tensors)} tensors, {len(payload):,} bytes)")
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    ckpt = decode(path.read_bytes())
    logger.info(f"Loaded checkpoint {path} ({len(ckpt.tensors)} tensors)")
    return ckpt


def check_compatible(ckpt: Checkpoint, expected_hash: str, source: str = "checkpoint"):
    stored = ckpt.meta.get("config_hash")
    if stored is None:
        raise CheckpointError(f"{source} carries no config hash")
    if stored != expected_hash:
        raise CheckpointError(
            f"{source} was written for config {stored[:12]}, current config is {expected_hash[:12]}"
        )