"""PAVC checkpoint serialization.

Layout: magic "PAVC", u32 version, u32 tensor count, then per tensor a
u32 name length, UTF-8 name, u8 dtype code, u8 rank, rank u64 dims, and
raw little-endian tensor data; the file ends with a CRC32 (u32) of every
preceding byte. Loading verifies magic, version, CRC, and optionally the
exact tensor name set, so a checkpoint saved for one architecture is
rejected by another's loader instead of half-applying.

Non-tensor metadata (architecture descriptor, version tag) rides along as
a JSON blob in a reserved u8 tensor named "__meta__".
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"PAVC"
VERSION = 1
META_NAME = "__meta__"

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("u1"): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: dict[str, np.ndarray], path, meta: dict | None = None) -> None:
    tensors = dict(params)
    if META_NAME in tensors:
        raise CheckpointError(f"{META_NAME} is reserved")
    if meta is not None:
        blob = json.dumps(meta, sort_keys=True).encode()
        tensors[META_NAME] = np.frombuffer(blob, dtype=np.uint8)

    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(tensors))
    for name in sorted(tensors):
        # asarray keeps rank 0 (ascontiguousarray would promote it to rank 1)
        arr = np.asarray(tensors[name], order="C")
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if np.dtype(dtype) not in _DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        arr = arr.astype(dtype, copy=False)
        encoded = name.encode()
        out += struct.pack("<I", len(encoded))
        out += encoded
        out += struct.pack("<BB", _DTYPE_CODES[np.dtype(dtype)], arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.raw):
            raise CheckpointError("truncated checkpoint")
        chunk = self.raw[self.pos : self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expect_names: set[str] | None = None) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise CheckpointError("truncated checkpoint")
    body, (crc_stored,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError("checksum mismatch")

    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode()
        code, rank = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        dtype = _CODE_DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = r.take(size * dtype.itemsize)
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(data, dtype=dtype).reshape(dims).copy()
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes after last tensor")

    meta = {}
    if META_NAME in tensors:
        meta = json.loads(tensors.pop(META_NAME).tobytes().decode())
    if expect_names is not None and set(tensors) != set(expect_names):
        missing = sorted(set(expect_names) - set(tensors))[:5]
        extra = sorted(set(tensors) - set(expect_names))[:5]
        raise CheckpointError(f"tensor name set mismatch: missing {missing}, unexpected {extra}")
    return tensors, meta


def module_params(module) -> dict[str, np.ndarray]:
    """Torch module state as a name -> float32 ndarray map."""
    return {
        name: tensor.detach().cpu().numpy().astype(np.float32, copy=True)
        for name, tensor in module.state_dict().items()
    }


def load_into(module, params: dict[str, np.ndarray]) -> None:
    import torch

    expected = set(module.state_dict())
    if set(params) != expected:
        raise CheckpointError(
            f"tensor name set mismatch: missing {sorted(expected - set(params))[:5]}, "
            f"unexpected {sorted(set(params) - expected)[:5]}"
        )
    module.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in params.items()})
