"""Single-file container: named tensors plus a JSON metadata header.

Layout::

    bytes 0..7    magic  b"ICUXAI01"
    bytes 8..15   uint64 little-endian header length
    then          UTF-8 JSON header
    then          raw little-endian array payload

The header carries the format version, a CRC-32 of the payload, one
entry per array (name, dtype, shape, offset, byte count) and a
free-form ``meta`` object. Checkpoints and datasets both use this
container.

Writes are deterministic: arrays are emitted in sorted name order and
the header is serialized with sorted keys and fixed separators, so the
same content always produces the same bytes. (A zip-based format was
rejected for exactly this reason — member timestamps make archives
non-reproducible.)
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import ParseError

MAGIC = b"ICUXAI01"
FORMAT_VERSION = 1

_HEADER_LEN = struct.Struct("<Q")
_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


def _wire_dtype(arr: np.ndarray) -> str:
    if np.issubdtype(arr.dtype, np.floating):
        return "<f8"
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        return "<i8"
    raise ValueError(f"cannot serialize array of dtype {arr.dtype}")


def save_container(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``arrays`` and ``meta`` to ``path`` as one container file."""
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        wire = _wire_dtype(np.asarray(arrays[name]))
        data = np.ascontiguousarray(arrays[name], dtype=_DTYPES[wire]).tobytes()
        entries.append({
            "name": name,
            "dtype": wire,
            "shape": list(np.asarray(arrays[name]).shape),
            "offset": len(payload),
            "nbytes": len(data),
        })
        payload += data
    header = {
        "version": FORMAT_VERSION,
        "crc32": zlib.crc32(bytes(payload)),
        "arrays": entries,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER_LEN.pack(len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container written by :func:`save_container`.

    Returns ``(arrays, meta)``. Raises :class:`ParseError` on a bad
    magic, unsupported version, malformed header, truncation, or
    checksum mismatch.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + _HEADER_LEN.size:
        raise ParseError(f"{path}: too short to be a container file")
    if raw[:len(MAGIC)] != MAGIC:
        raise ParseError(f"{path}: bad magic, not a container file")
    (header_len,) = _HEADER_LEN.unpack_from(raw, len(MAGIC))
    body_start = len(MAGIC) + _HEADER_LEN.size
    payload_start = body_start + header_len
    if payload_start > len(raw):
        raise ParseError(f"{path}: truncated header")
    try:
        header = json.loads(raw[body_start:payload_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"{path}: malformed header ({e})") from None
    version = header.get("version")
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported container version {version!r} "
                         f"(this build reads version {FORMAT_VERSION})")
    payload = raw[payload_start:]
    expected = sum(entry["nbytes"] for entry in header.get("arrays", []))
    if len(payload) != expected:
        raise ParseError(f"{path}: truncated payload "
                         f"({len(payload)} bytes, header promises {expected})")
    if zlib.crc32(payload) != header.get("crc32"):
        raise ParseError(f"{path}: payload checksum mismatch")
    arrays = {}
    for entry in header.get("arrays", []):
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise ParseError(f"{path}: unknown array dtype {entry['dtype']!r}")
        start, nbytes = entry["offset"], entry["nbytes"]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if count * dtype.itemsize != nbytes:
            raise ParseError(f"{path}: array {entry['name']!r} shape/bytes mismatch")
        flat = np.frombuffer(payload, dtype=dtype, count=count, offset=start)
        arrays[entry["name"]] = flat.reshape(shape).copy()
    return arrays, header.get("meta", {})
