"""Binary checkpoints: magic, version, JSON header, named blobs, checksum.

Layout (all integers little-endian):

    4 bytes   magic b"GFCK"
    u32       format version (currently 1)
    u32       header length, then that many bytes of UTF-8 JSON
    u32       blob count
    per blob: u16 name length, name bytes, u8 dtype code, u8 ndim,
              ndim * u32 dims, u64 payload length, raw array bytes
    u32       crc32 of every preceding byte

Blobs are float32 by default (code 0); float64 models round-trip via
code 1 so save/load is always bit-exact.  The header JSON carries the
model config, training step, RNG state, and optimizer step counter.
Writes go through a temp file and os.replace, so a crash mid-save
never leaves a truncated checkpoint at the target path.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .model import Adam, ModelConfig, ToyModel

MAGIC = b"GFCK"
VERSION = 1
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_CODE_DTYPES = {0: np.dtype("float32"), 1: np.dtype("float64")}


class CheckpointError(Exception):
    """A file that is not, or is no longer, a valid checkpoint."""


class CheckpointVersionError(CheckpointError):
    """A checkpoint written by an incompatible format version."""


@dataclass(eq=False)
class Checkpoint:
    config: ModelConfig
    params: dict
    step: int = 0
    rng_state: dict | None = None
    opt_step: int = 0
    opt_arrays: dict = field(default_factory=dict)

    def build_model(self) -> ToyModel:
        """Instantiate the model and overwrite its weights in place."""
        model = ToyModel(self.config)
        missing = set(model.params) - set(self.params)
        extra = set(self.params) - set(model.params)
        if missing or extra:
            raise CheckpointError(
                f"checkpoint parameters do not match the config: "
                f"missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}"
            )
        for name, arr in self.params.items():
            if model.params[name].shape != arr.shape:
                raise CheckpointError(
                    f"parameter {name!r} has shape {arr.shape}, "
                    f"expected {model.params[name].shape}"
                )
            model.params[name] = arr.astype(model.cfg.np_dtype())
        return model


def _pack_blob(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise ValueError(f"blob {name!r} has unsupported dtype {arr.dtype}")
    encoded = name.encode()
    payload = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
    head = struct.pack("<H", len(encoded)) + encoded
    head += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    head += struct.pack("<Q", len(payload))
    return head + payload


def save_checkpoint(path, model: ToyModel, step: int = 0,
                    optimizer: Adam | None = None,
                    rng_state: dict | None = None) -> None:
    header = {
        "config": model.cfg.to_dict(),
        "step": int(step),
        "rng_state": rng_state,
        "opt_step": int(optimizer.t) if optimizer is not None else 0,
    }
    blobs = dict(model.params)
    if optimizer is not None:
        blobs.update(optimizer.state_arrays())

    parts = [MAGIC, struct.pack("<I", VERSION)]
    header_bytes = json.dumps(header, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(header_bytes)))
    parts.append(header_bytes)
    parts.append(struct.pack("<I", len(blobs)))
    for name, arr in blobs.items():
        parts.append(_pack_blob(name, arr))
    body = b"".join(parts)
    body += struct.pack("<I", zlib.crc32(body))

    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(body)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"{self.path}: truncated checkpoint "
                f"(needed {n} bytes at offset {self.pos}, have {len(self.data) - self.pos})"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint (bad magic bytes)")
    if len(data) < 8 + 4:
        raise CheckpointError(f"{path}: truncated checkpoint (no room for checksum)")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    actual_crc = zlib.crc32(data[:-4])
    if stored_crc != actual_crc:
        raise CheckpointError(
            f"{path}: checksum mismatch "
            f"(stored {stored_crc:#010x}, computed {actual_crc:#010x}); file is corrupt"
        )

    rd = _Reader(data[:-4], path)
    rd.take(4)  # magic, already verified
    (version,) = rd.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(
            f"{path}: unsupported checkpoint format version {version} (expected {VERSION})"
        )
    (hlen,) = rd.unpack("<I")
    try:
        header = json.loads(rd.take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: unreadable checkpoint header: {err}") from err

    (count,) = rd.unpack("<I")
    blobs = {}
    for _ in range(count):
        (nlen,) = rd.unpack("<H")
        name = rd.take(nlen).decode()
        code, ndim = rd.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: blob {name!r} has unknown dtype code {code}")
        shape = rd.unpack(f"<{ndim}I") if ndim else ()
        (plen,) = rd.unpack("<Q")
        dtype = _CODE_DTYPES[code]
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        if plen != expected:
            raise CheckpointError(
                f"{path}: blob {name!r} payload is {plen} bytes, "
                f"shape {shape} implies {expected}"
            )
        raw = rd.take(plen)
        blobs[name] = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(
            dtype
        ).reshape(shape)
    if rd.pos != len(rd.data):
        raise CheckpointError(
            f"{path}: {len(rd.data) - rd.pos} unexpected trailing bytes before checksum"
        )

    params = {n: a for n, a in blobs.items() if not n.startswith("opt.")}
    opt_arrays = {n: a for n, a in blobs.items() if n.startswith("opt.")}
    return Checkpoint(
        config=ModelConfig.from_dict(header["config"]),
        params=params,
        step=int(header.get("step", 0)),
        rng_state=header.get("rng_state"),
        opt_step=int(header.get("opt_step", 0)),
        opt_arrays=opt_arrays,
    )
