"""Self-describing binary container used for feature caches and checkpoints.

Layout (little-endian)::

    magic      4 bytes
    version    uint16
    meta_len   uint32, followed by a UTF-8 JSON metadata record
    n_entries  uint32
    entries    name_len uint16, name utf-8, dtype uint8 (0=float32, 1=float64),
               ndim uint8, dims uint32 * ndim, raw array bytes
"""
import json
import struct

import numpy as np

from .errors import CheckpointVersionError, FormatError

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}


def write_container(path, magic, version, metadata, arrays, dtype="float32"):
    dt = np.dtype(dtype).newbyteorder("<")
    parts = [magic, struct.pack("<H", version)]
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(arrays))]
    for name, array in arrays.items():
        array = np.ascontiguousarray(array, dtype=dt)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<BB", _CODES[dt], array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(array.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_container(path, magic, version, error=FormatError):
    """Returns ``(metadata, {name: float64 array})``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != magic:
        raise error(f"{path}: bad magic {blob[:4]!r}, expected {magic!r}")
    try:
        (found,) = struct.unpack_from("<H", blob, 4)
        if found != version:
            raise CheckpointVersionError(f"{path}: format version {found}, expected {version}")
        offset = 6
        (meta_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        metadata = json.loads(blob[offset:offset + meta_len].decode("utf-8"))
        offset += meta_len
        (count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            code, ndim = struct.unpack_from("<BB", blob, offset)
            offset += 2
            shape = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if offset + nbytes > len(blob):
                raise error(f"{path}: truncated entry {name!r}")
            arrays[name] = np.frombuffer(blob, dt, int(np.prod(shape)), offset).reshape(shape).astype(np.float64)
            offset += nbytes
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise error(f"{path}: corrupt container ({exc})") from exc
    return metadata, arrays
