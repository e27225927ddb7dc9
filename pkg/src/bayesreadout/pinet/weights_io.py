"""Binary container for network weights (``.pinw``).

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic  b"PINW"
    4       4     uint32 format version (currently 1)
    8       8     uint64 header length H in bytes
    16      H     UTF-8 JSON header, keys sorted, no whitespace
    16+H    P     payload: tensors as float64 little-endian, row-major,
                  concatenated in header order

The JSON header holds ``architecture``, ``standardization``, ``metadata``,
``tensors`` (a list of ``{"name", "shape", "dtype", "offset", "nbytes"}``
with offsets relative to the payload start), ``payload_nbytes`` and
``payload_crc32`` (zlib CRC-32 of the payload).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from ..errors import ArchitectureError, DataFormatError
from .model import ArchitectureSpec, NetworkWeights

MAGIC = b"PINW"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def to_bytes(weights: NetworkWeights) -> bytes:
    chunks, entries, offset = [], [], 0
    for name, t in weights.tensors.items():
        data = np.ascontiguousarray(t, dtype="<f8").tobytes(order="C")
        entries.append({"name": name, "shape": list(t.shape), "dtype": "<f8", "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = {
        "architecture": weights.architecture.to_dict(),
        "standardization": weights.standardization,
        "metadata": weights.metadata,
        "tensors": entries,
        "payload_nbytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + payload


def from_bytes(blob: bytes) -> NetworkWeights:
    if len(blob) < _PREFIX.size:
        raise DataFormatError("weight file truncated before header")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise DataFormatError("not a weight file (bad magic)")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"unsupported weight format version {version}")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise DataFormatError("weight file truncated inside header")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"corrupt weight header: {exc}") from None
    payload = blob[start + hlen :]
    if len(payload) != header.get("payload_nbytes"):
        raise DataFormatError(f"weight payload has {len(payload)} bytes, header says {header.get('payload_nbytes')}")
    if zlib.crc32(payload) != header.get("payload_crc32"):
        raise DataFormatError("weight payload checksum mismatch")
    tensors = {}
    try:
        for e in header["tensors"]:
            if e["dtype"] != "<f8":
                raise DataFormatError(f"unsupported tensor dtype {e['dtype']!r}")
            shape = tuple(int(d) for d in e["shape"])
            count = int(np.prod(shape, dtype=np.int64))
            if count * 8 != e["nbytes"]:
                raise DataFormatError(f"tensor {e['name']!r}: shape and byte count disagree")
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"])
            tensors[e["name"]] = arr.reshape(shape).astype(np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"corrupt tensor table: {exc}") from None
    try:
        return NetworkWeights(
            ArchitectureSpec.from_dict(header["architecture"]),
            tensors,
            header["standardization"],
            header["metadata"],
        )
    except (ArchitectureError, KeyError) as exc:
        raise DataFormatError(f"inconsistent weight file: {exc}") from None


def save_weights(weights: NetworkWeights, path) -> Path:
    """Write atomically (temporary file + rename)."""
    path = Path(path)
    blob = to_bytes(weights)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        # mkstemp creates 0600; give the file the usual umask-derived mode
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_weights(path) -> NetworkWeights:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read weight file {path}: {exc}") from None
    return from_bytes(blob)


def default_weights_path() -> Path:
    return Path(__file__).resolve().parent.parent / "data" / "pinet_default.pinw"
