"""
Byte-exact serialization: named-tensor archives, PFM float maps, PPM images
and JSON documents.

Archive layout (all integers little-endian)::

    magic      4 bytes  b"SSA2"
    version    u32      1
    count      u32      number of tensors
    index      count x {name_len u16, name UTF-8, dtype u8, rank u8,
                        dims rank x u32, offset u64}
    data       contiguous row-major payloads, in index order

``offset`` is the absolute byte position of a payload inside the file. An
empty archive is exactly ``HEADER_SIZE`` (12) bytes long.
"""
import logging
import os
import struct
from collections.abc import Iterable, Mapping
from typing import Any

import numpy as np
from numpy.typing import NDArray
from pydantic_core import from_json, to_json
from smart_open import open

from tools.errors import (
    ArchiveError,
    BadMagicError,
    DuplicateTensorError,
    PfmFormatError,
    PpmFormatError,
    TruncatedArchiveError,
    UnknownDtypeError,
)

logger = logging.getLogger(__name__)

MAGIC = b"SSA2"
VERSION = 1
HEADER_SIZE = 12
DTYPE_F32 = 0

_HEADER = struct.Struct("<4sII")
_NAME_LEN = struct.Struct("<H")
_DTYPE_RANK = struct.Struct("<BB")
_OFFSET = struct.Struct("<Q")

TensorInput = Mapping[str, NDArray[Any]] | Iterable[tuple[str, NDArray[Any]]]


def _as_f32(name: str, value: NDArray[Any], convert_doubles: bool) -> NDArray[np.float32]:
    array = np.asarray(value)
    if array.dtype == np.float32:
        return array.astype("<f4", copy=False)
    if array.dtype == np.float64 and convert_doubles:
        return array.astype("<f4")
    raise UnknownDtypeError(
        f"Tensor '{name}' has dtype {array.dtype}; only float32 is stored"
        " (pass convert_doubles=True to narrow float64)"
    )


def archive_write(tensors: TensorInput, convert_doubles: bool = False) -> bytes:
    """
    Encode named tensors into an archive.

    Args:
        tensors: mapping or sequence of (name, array) pairs, insertion order kept
        convert_doubles: narrow float64 tensors to float32 instead of failing

    Returns:
        The archive bytes
    """
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)

    seen: set[str] = set()
    entries: list[tuple[bytes, NDArray[np.float32]]] = []
    for name, value in items:
        if name in seen:
            raise DuplicateTensorError(f"Duplicate tensor name: {name}")
        seen.add(name)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ArchiveError(f"Tensor name too long: {name[:32]}...")
        entries.append((encoded, _as_f32(name, value, convert_doubles)))

    index_size = sum(
        _NAME_LEN.size + len(encoded) + _DTYPE_RANK.size + 4 * array.ndim + _OFFSET.size
        for encoded, array in entries
    )
    offset = HEADER_SIZE + index_size

    index = bytearray()
    payloads = bytearray()
    for encoded, array in entries:
        index += _NAME_LEN.pack(len(encoded)) + encoded
        index += _DTYPE_RANK.pack(DTYPE_F32, array.ndim)
        index += struct.pack(f"<{array.ndim}I", *array.shape)
        index += _OFFSET.pack(offset)
        payload = np.ascontiguousarray(array).tobytes()
        payloads += payload
        offset += len(payload)

    return _HEADER.pack(MAGIC, VERSION, len(entries)) + bytes(index) + bytes(payloads)


def archive_read(data: bytes) -> dict[str, NDArray[np.float32]]:
    """Decode an archive produced by ``archive_write``; insertion order is preserved."""
    if len(data) < HEADER_SIZE:
        raise TruncatedArchiveError(f"Archive shorter than its header ({len(data)} bytes)")
    magic, version, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"Bad archive magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise BadMagicError(f"Unsupported archive version {version}")

    def take(fmt: struct.Struct, pos: int) -> tuple[Any, ...]:
        if pos + fmt.size > len(data):
            raise TruncatedArchiveError(f"Archive index truncated at byte {pos}")
        return fmt.unpack_from(data, pos)

    pos = HEADER_SIZE
    layout: list[tuple[str, tuple[int, ...], int]] = []
    for _ in range(count):
        (name_len,) = take(_NAME_LEN, pos)
        pos += _NAME_LEN.size
        if pos + name_len > len(data):
            raise TruncatedArchiveError(f"Archive index truncated at byte {pos}")
        try:
            name = data[pos : pos + name_len].decode("utf-8")
        except UnicodeDecodeError as e:
            raise ArchiveError(f"Tensor name at byte {pos} is not valid UTF-8: {e}") from e
        pos += name_len
        dtype, rank = take(_DTYPE_RANK, pos)
        pos += _DTYPE_RANK.size
        if dtype != DTYPE_F32:
            raise UnknownDtypeError(f"Tensor '{name}' has unknown dtype code {dtype}")
        dims = take(struct.Struct(f"<{rank}I"), pos)
        pos += 4 * rank
        (offset,) = take(_OFFSET, pos)
        pos += _OFFSET.size
        if any(existing == name for existing, _, _ in layout):
            raise DuplicateTensorError(f"Duplicate tensor name in archive: {name}")
        layout.append((name, tuple(int(d) for d in dims), int(offset)))

    tensors: dict[str, NDArray[np.float32]] = {}
    data_start = pos
    cursor = data_start
    for name, dims, offset in layout:
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if offset < cursor:
            raise TruncatedArchiveError(
                f"Tensor '{name}' payload at {offset} overlaps the index or a previous payload"
            )
        if offset + nbytes > len(data):
            raise TruncatedArchiveError(
                f"Tensor '{name}' payload [{offset}, {offset + nbytes}) exceeds archive size {len(data)}"
            )
        tensors[name] = (
            np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=offset).reshape(dims).copy()
        )
        cursor = offset + nbytes
    return tensors


def save_archive(path: str, tensors: TensorInput, convert_doubles: bool = False) -> None:
    with open(path, "wb") as f:
        f.write(archive_write(tensors, convert_doubles=convert_doubles))
    logger.info(f"[tensor_io] Wrote archive {path}")


def load_archive(path: str) -> dict[str, NDArray[np.float32]]:
    with open(path, "rb") as f:
        return archive_read(f.read())


def pfm_encode(image: NDArray[Any]) -> bytes:
    """
    Encode a single-channel map as little-endian PFM.

    Rows are stored bottom-up; the scale field is written as -1.0.
    """
    array = np.asarray(image)
    if array.ndim != 2 or 0 in array.shape:
        raise PfmFormatError(f"PFM expects a non-empty 2D map, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise PfmFormatError("PFM payload must be finite")
    height, width = array.shape
    header = f"Pf\n{width} {height}\n-1.0\n".encode("ascii")
    # NOTE: bottom up
    payload = np.ascontiguousarray(array[::-1].astype("<f4")).tobytes()
    return header + payload


def _read_header_line(data: bytes, pos: int) -> tuple[str, int]:
    end = data.find(b"\n", pos)
    if end < 0:
        raise PfmFormatError("Malformed PFM header: missing newline")
    return data[pos:end].decode("ascii").strip(), end + 1


def pfm_decode(data: bytes) -> NDArray[np.float32]:
    try:
        kind, pos = _read_header_line(data, 0)
        if kind != "Pf":
            raise PfmFormatError(f"Malformed PFM header: expected 'Pf', got {kind!r}")
        dims, pos = _read_header_line(data, pos)
        width, height = (int(v) for v in dims.split())
        scale_line, pos = _read_header_line(data, pos)
        scale = float(scale_line)
    except (UnicodeDecodeError, ValueError) as e:
        raise PfmFormatError(f"Malformed PFM header: {e}") from e

    if width <= 0 or height <= 0 or scale == 0.0:
        raise PfmFormatError(f"Malformed PFM header: {width}x{height}, scale {scale}")
    expected = 4 * width * height
    if len(data) - pos != expected:
        raise PfmFormatError(
            f"PFM size mismatch: expected {expected} payload bytes, found {len(data) - pos}"
        )
    dtype = "<f4" if scale < 0 else ">f4"
    rows = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    return rows.reshape(height, width)[::-1].astype(np.float32)


def pfm_write(path: str, image: NDArray[Any]) -> None:
    with open(path, "wb") as f:
        f.write(pfm_encode(image))


def pfm_read(path: str) -> NDArray[np.float32]:
    with open(path, "rb") as f:
        return pfm_decode(f.read())


def ppm_encode(image: NDArray[Any]) -> bytes:
    """Encode an [H x W x 3] image with values in [0, 1] as binary 8-bit PPM (P6)."""
    array = np.asarray(image)
    if array.ndim != 3 or array.shape[2] != 3:
        raise PpmFormatError(f"PPM expects an [H x W x 3] image, got shape {array.shape}")
    height, width, _ = array.shape
    pixels = np.clip(np.rint(array * 255.0), 0, 255).astype(np.uint8)
    return f"P6\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def ppm_decode(data: bytes) -> NDArray[np.float64]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.find(b"\n", pos) + 1
            if pos == 0:
                raise PpmFormatError("Malformed PPM header: unterminated comment")
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PpmFormatError("Malformed PPM header: truncated")
        tokens.append(data[start:pos])
    pos += 1

    if tokens[0] != b"P6":
        raise PpmFormatError(f"Unsupported PPM kind {tokens[0]!r}, expected P6")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise PpmFormatError(f"Malformed PPM header: {e}") from e
    if maxval != 255:
        raise PpmFormatError(f"Only 8-bit PPM is supported, got maxval {maxval}")
    expected = width * height * 3
    if len(data) - pos != expected:
        raise PpmFormatError(f"PPM size mismatch: expected {expected} bytes, found {len(data) - pos}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=expected, offset=pos)
    return pixels.reshape(height, width, 3).astype(np.float64) / 255.0


def ppm_write(path: str, image: NDArray[Any]) -> None:
    with open(path, "wb") as f:
        f.write(ppm_encode(image))


def ppm_read(path: str) -> NDArray[np.float64]:
    with open(path, "rb") as f:
        return ppm_decode(f.read())


def write_json(path: str, document: Any) -> None:
    with open(path, "wb") as f:
        f.write(to_json(document, indent=2))


def read_json(path: str) -> Any:
    with open(path, "rb") as f:
        return from_json(f.read())


# ============================================================================
# Paths: local files and smart_open URIs alike
# ============================================================================


def is_uri(path: str) -> bool:
    return "://" in path


def join_path(base: str | os.PathLike[str], *names: str) -> str:
    """os.path.join for local paths; URIs are joined with '/'."""
    base = os.fspath(base)
    if is_uri(base):
        return "/".join([base.rstrip("/"), *names])
    return os.path.join(base, *names)


def parent_dir(path: str) -> str:
    """Directory part of a local path or URI; "." for a bare file name."""
    if is_uri(path):
        return path.rsplit("/", 1)[0]
    return os.path.dirname(path) or "."


def ensure_dir(path: str) -> None:
    """Create a local output directory; object stores need none."""
    if not is_uri(path):
        os.makedirs(path, exist_ok=True)


def read_bytes(path: str) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def path_exists(path: str) -> bool:
    """True when ``path`` can be opened for reading."""
    try:
        with open(path, "rb"):
            return True
    except (OSError, ValueError):
        return False
