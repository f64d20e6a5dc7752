"""Binary file formats: PHXT tensors, PHXC checkpoints, PGM/PPM images.

PHXT: magic ``PHXT``, u16 version (=1), u8 dtype code (0 = float32), u8 rank,
then rank u64 dims, then the row-major little-endian float32 payload.

PHXC: magic ``PHXC``, u16 version (=1), u32 parameter count, then per
parameter: u16 name length, UTF-8 name, u8 flags (bit 0 = personal), and an
embedded PHXT record.

All multi-byte header fields are little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

PHXT_MAGIC = b"PHXT"
PHXC_MAGIC = b"PHXC"
FORMAT_VERSION = 1
DTYPE_F32 = 0


class FormatError(ValueError):
    """A file does not conform to the PHXT/PHXC layout."""


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what} at offset {f.tell() - len(buf)}")
    return buf


def write_tensor_to(f: BinaryIO, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if arr.ndim < 1:
        arr = arr.reshape(1)
    if not np.all(np.isfinite(arr)):
        raise FormatError("refusing to write non-finite tensor values")
    f.write(PHXT_MAGIC)
    f.write(struct.pack("<HBB", FORMAT_VERSION, DTYPE_F32, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.astype("<f4").tobytes())


def read_tensor_from(f: BinaryIO) -> np.ndarray:
    magic = _read_exact(f, 4, "magic")
    if magic != PHXT_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r} at offset {f.tell() - 4}")
    version, dtype_code, rank = struct.unpack("<HBB", _read_exact(f, 4, "tensor header"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported tensor format version {version}")
    if dtype_code != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype_code}")
    if rank < 1:
        raise FormatError("tensor rank must be at least 1")
    dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, "tensor dims"))
    if any(d < 1 for d in dims):
        raise FormatError(f"tensor dims must be positive, got {dims}")
    count = int(np.prod(dims))
    payload = _read_exact(f, 4 * count, "tensor payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise FormatError("tensor payload contains non-finite values")
    return arr


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor_to(f, array)


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor_from(f)


def write_checkpoint(
    path: str | Path,
    params: Mapping[str, np.ndarray],
    personal_names: set[str] | frozenset[str] = frozenset(),
) -> None:
    """Persist a named parameter table with per-parameter personal flags."""
    with open(path, "wb") as f:
        f.write(PHXC_MAGIC)
        f.write(struct.pack("<HI", FORMAT_VERSION, len(params)))
        for name, arr in params.items():
            encoded = name.encode("utf-8")
            flags = 1 if name in personal_names else 0
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", flags))
            write_tensor_to(f, arr)


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], set[str]]:
    """Load a parameter table; returns (params, personal-flagged names)."""
    params: dict[str, np.ndarray] = {}
    personal: set[str] = set()
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != PHXC_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        version, count = struct.unpack("<HI", _read_exact(f, 6, "checkpoint header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint format version {version}")
        for i in range(count):
            try:
                (name_len,) = struct.unpack("<H", _read_exact(f, 2, f"record {i} name length"))
                name = _read_exact(f, name_len, f"record {i} name").decode("utf-8")
                (flags,) = struct.unpack("<B", _read_exact(f, 1, f"record {i} flags"))
                arr = read_tensor_from(f)
            except FormatError as exc:
                raise FormatError(f"checkpoint record {i}: {exc}") from None
            if name in params:
                raise FormatError(f"checkpoint record {i}: duplicate parameter '{name}'")
            params[name] = arr
            if flags & 1:
                personal.add(name)
        if f.read(1):
            raise FormatError("trailing bytes after last checkpoint record")
    return params, personal


def write_image(path: str | Path, image: np.ndarray) -> None:
    """Write one (C,H,W) image in [-1, 1] as binary PGM (C=1) or PPM (C=3)."""
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise FormatError(f"image must be (1|3, H, W), got {image.shape}")
    c, h, w = image.shape
    pixels = np.clip(np.round((image + 1.0) * 127.5), 0, 255).astype(np.uint8)
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode("ascii")
    # PGM/PPM interleave channels per pixel; our layout is channel-major.
    body = pixels[0] if c == 1 else pixels.transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(body).tobytes())


def image_extension(channels: int) -> str:
    return "pgm" if channels == 1 else "ppm"
