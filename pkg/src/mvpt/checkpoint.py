"""Binary checkpoint format.

Layout (all little-endian):
  magic "MVPT" | format version u32 | tensor count u32
  per tensor: name length u16, UTF-8 name, dtype code u8, rank u8, extents u64...
  raw payloads in manifest order | CRC32 (u32) of all payload bytes

The frozen/learnable partition is stored as a boolean side-table: one u8
tensor named "mask.<tensor name>" per parameter (1 = frozen).
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .backbone import ConfigError, ModelState

MAGIC = b"MVPT"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODE_OF = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(RuntimeError):
    """Corrupt or mismatched checkpoint file."""


def _dtype_code(arr):
    dt = np.dtype(arr.dtype).newbyteorder("<")
    if dt not in _CODE_OF:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return _CODE_OF[dt]


def save_checkpoint(state: ModelState, path):
    entries = []
    for name in state.names():
        entries.append((name, np.ascontiguousarray(state[name].data)))
    for name in state.names():
        entries.append((f"mask.{name}",
                        np.array([1 if state.frozen[name] else 0], dtype=np.uint8)))
    manifest = bytearray()
    payload = bytearray()
    for name, arr in entries:
        nb = name.encode("utf-8")
        arr_le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        manifest += struct.pack("<H", len(nb)) + nb
        manifest += struct.pack("<BB", _dtype_code(arr), arr.ndim)
        manifest += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        payload += arr_le.tobytes()
    blob = MAGIC + struct.pack("<II", VERSION, len(entries)) + bytes(manifest)
    blob += bytes(payload) + struct.pack("<I", zlib.crc32(bytes(payload)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(blob)


def load_arrays(path):
    """Read a checkpoint into ({name: array}, {name: frozen}) without shape
    validation against any config."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    manifest = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        code, rank = struct.unpack_from("<BB", blob, off)
        off += 2
        shape = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        manifest.append((name, _DTYPE_CODES[code], shape))
    payload_len = sum(int(np.prod(s, dtype=np.int64)) * dt.itemsize
                      for _, dt, s in manifest)
    if off + payload_len + 4 != len(blob):
        raise CheckpointError(f"truncated payload in {path}")
    payload = blob[off:off + payload_len]
    (crc,) = struct.unpack_from("<I", blob, off + payload_len)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"payload checksum mismatch in {path}")
    arrays = {}
    frozen = {}
    pos = 0
    for name, dt, shape in manifest:
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype=dt, count=n, offset=pos).reshape(shape)
        pos += n * dt.itemsize
        if name.startswith("mask."):
            frozen[name[5:]] = bool(arr[0])
        else:
            arrays[name] = arr
    return arrays, frozen


def load_checkpoint(path, expected_shapes=None) -> ModelState:
    """Rebuild a ModelState; `expected_shapes` (name -> shape) cross-checks the
    payload against the configuration."""
    arrays, frozen = load_arrays(path)
    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            if name not in arrays:
                raise CheckpointError(f"checkpoint missing tensor {name}")
            if tuple(arrays[name].shape) != tuple(shape):
                raise CheckpointError(
                    f"{name}: checkpoint shape {tuple(arrays[name].shape)} "
                    f"vs configured {tuple(shape)}")
    state = ModelState()
    for name, arr in arrays.items():
        state.add(name, arr, frozen=frozen.get(name, False))
    return state
