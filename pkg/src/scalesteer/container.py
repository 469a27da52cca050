"""Portable binary tensor container.

Layout (all integers little-endian):

    magic   4 bytes  b"SESN"
    version u32
    count   u32
    per tensor:
        name_len u32, name UTF-8
        dtype    u8   (1=f32, 2=f64, 3=i64, 4=u8)
        rank     u8
        extents  u64 x rank
        payload  raw little-endian values
    crc32   u32 over every preceding byte

Round trips are byte-exact; the trailing CRC rejects any corruption of the
preceding stream.
"""

import struct
import zlib

import numpy as np

MAGIC = b"SESN"
VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
    np.dtype("u1"): 4,
}
_CODE_DTYPES = {code: dt for dt, code in _DTYPE_CODES.items()}


class ContainerError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors in insertion order; names must be unique."""
    if len(set(tensors)) != len(tensors):
        raise ContainerError("duplicate tensor names")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value)
        # ascontiguousarray promotes rank 0 to rank 1; keep true scalars
        arr = np.ascontiguousarray(arr) if arr.ndim else arr
        if arr.dtype not in _DTYPE_CODES:
            arr = _coerce_dtype(name, arr)
        code = _DTYPE_CODES[arr.dtype]
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.tobytes())
    blob = b"".join(chunks)
    crc = zlib.crc32(blob) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(blob)
        fh.write(struct.pack("<I", crc))


def _coerce_dtype(name: str, arr: np.ndarray) -> np.ndarray:
    kind = arr.dtype.kind
    if kind == "f":
        return arr.astype("<f8")
    if kind in "iu" and arr.dtype != np.dtype("u1"):
        return arr.astype("<i8")
    raise ContainerError(f"tensor {name!r} has unsupported dtype {arr.dtype}")


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 12:
        raise ContainerError("file too short for a container")
    if raw[:4] != MAGIC:
        raise ContainerError(f"bad magic {raw[:4]!r}")
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    actual_crc = zlib.crc32(raw[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ContainerError(f"CRC mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    pos = 12
    body_end = len(raw) - 4
    tensors: dict[str, np.ndarray] = {}

    def need(nbytes, what):
        if pos + nbytes > body_end:
            raise ContainerError(f"truncated container while reading {what}")

    for _ in range(count):
        need(4, "name length")
        (name_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        need(name_len, "name")
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        if name in tensors:
            raise ContainerError(f"duplicate tensor name {name!r}")
        need(2, "tensor header")
        code, rank = struct.unpack_from("<BB", raw, pos)
        pos += 2
        if code not in _CODE_DTYPES:
            raise ContainerError(f"unknown dtype code {code} for {name!r}")
        need(8 * rank, "extents")
        shape = struct.unpack_from(f"<{rank}Q", raw, pos) if rank else ()
        pos += 8 * rank
        dtype = _CODE_DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        nbytes = size * dtype.itemsize
        need(nbytes, f"payload of {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dtype, count=size, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != body_end:
        raise ContainerError(f"{body_end - pos} trailing bytes after the last tensor")
    return tensors


def summarize(path) -> str:
    """Human-readable one-line-per-tensor summary."""
    tensors = load_tensors(path)
    lines = [f"container {path}: {len(tensors)} tensors"]
    for name, arr in tensors.items():
        stats = ""
        if arr.dtype.kind == "f" and arr.size:
            stats = f" min={arr.min():.6g} max={arr.max():.6g}"
        lines.append(f"  {name}: {arr.dtype} {list(arr.shape)}{stats}")
    return "\n".join(lines)
