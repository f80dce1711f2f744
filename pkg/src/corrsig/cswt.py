"""CSWT v1 weight files.

Layout: 8-byte magic "CSWT0001", then an 8-byte little-endian uint64 giving
the byte length of a UTF-8 JSON header, then the header, then a raw payload
of little-endian float32 values.  The header is
``{"entries": [{"name", "shape", "offset"}, ...], "meta": {...}}`` with
offsets measured from the start of the payload.
"""

import json
import struct

import numpy as np

from .errors import DataError

MAGIC = b"CSWT0001"


def save_weights(path, arrays, meta=None):
    """Write a name -> array mapping. Arrays are stored as float32."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = {"entries": entries, "meta": dict(meta) if meta else {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)


def load_weights(path):
    """Return (name -> float32 array, meta dict)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise DataError("%s: not a CSWT v1 weight file" % path)
    hlen = struct.unpack("<Q", raw[8:16])[0]
    if 16 + hlen > len(raw):
        raise DataError("%s: truncated header" % path)
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError("%s: bad header: %s" % (path, exc)) from exc
    payload = raw[16 + hlen:]
    arrays = {}
    for ent in header.get("entries", []):
        shape = tuple(int(s) for s in ent["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = int(ent["offset"])
        end = start + 4 * count
        if end > len(payload):
            raise DataError("%s: entry %r overruns payload" % (path, ent["name"]))
        arrays[ent["name"]] = np.frombuffer(
            payload, dtype="<f4", count=count, offset=start).reshape(shape).copy()
    return arrays, header.get("meta", {})
