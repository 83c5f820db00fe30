"""Binary tensor files, checkpoint bundles, JSON manifests, PPM frames.

Single-tensor format: 8-byte magic "ICTXTNSR", u8 dtype code (0 = float32,
1 = float64), u8 rank, rank little-endian u64 extents, then the raw values
little-endian in C order.

Bundle format (checkpoints, adapters): 8-byte magic "ICTXBNDL", u64 header
length, UTF-8 canonical-JSON header {"format_version", "meta", "tensors"},
then one single-tensor record per name in header order. One file, parsed
fully before any state is returned, so a truncated file never yields
partial state.

All writes go to a temp file in the target directory followed by an atomic
rename.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from typing import Any, BinaryIO, Dict, Tuple

import numpy as np

TENSOR_MAGIC = b"ICTXTNSR"
BUNDLE_MAGIC = b"ICTXBNDL"
BUNDLE_FORMAT_VERSION = 1

_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_TO_DTYPE = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}
_MAX_RANK = 8


class SerializationError(RuntimeError):
    """Corrupt, truncated, or out-of-contract file content."""


def _atomic_write_bytes(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def tensor_bytes(arr: np.ndarray) -> bytes:
    # np.asarray, not ascontiguousarray: the latter promotes rank 0 to rank 1.
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_TO_CODE:
        raise SerializationError(f"unsupported dtype {arr.dtype}; expected float32/float64")
    if arr.ndim > _MAX_RANK:
        raise SerializationError(f"rank {arr.ndim} exceeds maximum {_MAX_RANK}")
    head = TENSOR_MAGIC + struct.pack("<BB", _DTYPE_TO_CODE[arr.dtype], arr.ndim)
    extents = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    values = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    return head + extents + values


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise SerializationError(f"truncated file: expected {n} bytes of {what}, got {len(buf)}")
    return buf


def read_tensor_record(fh: BinaryIO) -> np.ndarray:
    magic = _read_exact(fh, 8, "magic")
    if magic != TENSOR_MAGIC:
        raise SerializationError(f"bad tensor magic {magic!r}")
    code, rank = struct.unpack("<BB", _read_exact(fh, 2, "dtype/rank"))
    if code not in _CODE_TO_DTYPE:
        raise SerializationError(f"unknown dtype code {code}")
    if rank > _MAX_RANK:
        raise SerializationError(f"rank {rank} exceeds maximum {_MAX_RANK}")
    dtype = _CODE_TO_DTYPE[code]
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "extents")) if rank else ()
    count = 1
    for e in shape:
        count *= e
    payload = _read_exact(fh, count * dtype.itemsize, "tensor values")
    arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype, copy=True)
    return arr.reshape(shape)


def save_tensor(path: str, arr: np.ndarray) -> None:
    _atomic_write_bytes(path, tensor_bytes(arr))


def load_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_tensor_record(fh)
        if fh.read(1):
            raise SerializationError(f"trailing bytes after tensor payload in {path}")
    return arr


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_bundle(path: str, tensors: Dict[str, np.ndarray], meta: Dict[str, Any]) -> None:
    names = sorted(tensors)
    header = canonical_json({
        "format_version": BUNDLE_FORMAT_VERSION,
        "meta": meta,
        "tensors": names,
    }).encode("utf-8")
    parts = [BUNDLE_MAGIC, struct.pack("<Q", len(header)), header]
    for name in names:
        parts.append(tensor_bytes(tensors[name]))
    _atomic_write_bytes(path, b"".join(parts))


def load_bundle(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 8, "bundle magic")
        if magic != BUNDLE_MAGIC:
            raise SerializationError(f"bad bundle magic {magic!r} in {path}")
        (header_len,) = struct.unpack("<Q", _read_exact(fh, 8, "header length"))
        try:
            header = json.loads(_read_exact(fh, header_len, "header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise SerializationError(f"unreadable bundle header in {path}: {exc}") from exc
        version = header.get("format_version")
        if version != BUNDLE_FORMAT_VERSION:
            raise SerializationError(f"unsupported bundle format_version {version!r}")
        names = header.get("tensors")
        if not isinstance(names, list):
            raise SerializationError("bundle header missing tensor name list")
        tensors: Dict[str, np.ndarray] = {}
        for name in names:
            tensors[name] = read_tensor_record(fh)
        if fh.read(1):
            raise SerializationError(f"trailing bytes after last tensor in {path}")
    return tensors, header.get("meta", {})


def write_json(path: str, obj: Any) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    _atomic_write_bytes(path, text.encode("utf-8"))


def read_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_ppm(path: str, frame: np.ndarray) -> None:
    """Write one frame (C×H×W, C in {1, 3}, values nominally [-1, 1]) as binary PPM."""
    if frame.ndim != 3 or frame.shape[0] not in (1, 3):
        raise SerializationError(f"PPM frame must be (1|3)xHxW, got {frame.shape}")
    if frame.shape[0] == 1:
        frame = np.repeat(frame, 3, axis=0)
    _, h, w = frame.shape
    u8 = np.round((np.clip(frame, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
    body = u8.transpose(1, 2, 0).tobytes(order="C")
    _atomic_write_bytes(path, f"P6\n{w} {h}\n255\n".encode("ascii") + body)


def read_ppm(path: str) -> np.ndarray:
    """Read a binary PPM into a float32 C×H×W array in [-1, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos] in b" \t\r\n":
            pos += 1
        if pos < len(data) and data[pos] == ord("#"):
            while pos < len(data) and data[pos] != ord("\n"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos] not in b" \t\r\n":
            pos += 1
        if start == pos:
            raise SerializationError(f"truncated PPM header in {path}")
        fields.append(data[start:pos])
    pos += 1
    if fields[0] != b"P6":
        raise SerializationError(f"not a binary PPM (P6): {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise SerializationError(f"unsupported PPM maxval {maxval}")
    body = data[pos:pos + 3 * w * h]
    if len(body) != 3 * w * h:
        raise SerializationError(f"truncated PPM payload in {path}")
    u8 = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return (u8.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)
