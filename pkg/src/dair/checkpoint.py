"""Binary checkpoint files.

Layout: 8-byte magic ``DAIRCKPT``, little-endian u32 format version, u64
header length, a UTF-8 JSON header, then the raw little-endian float64 data of
every tensor back to back. The header lists each tensor's name, shape and byte
offset into the data block next to free-form metadata. Field tables live in
``docs/formats.md``.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"DAIRCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays, meta):
    """Write ``arrays`` (name -> float array) and a JSON-able ``meta`` dict."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(arrays, meta)``; raises :class:`CheckpointError` on bad files."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from None
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt header") from None
    data = raw[start + hlen :]
    arrays = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64)) * 8
        if e["offset"] + n > len(data):
            raise CheckpointError(f"{path}: tensor {e['name']!r} runs past end of file (truncated?)")
        arrays[e["name"]] = np.frombuffer(data, dtype="<f8", count=n // 8, offset=e["offset"]).reshape(tuple(e["shape"])).copy()
    return arrays, header["meta"]
