"""Self-describing checkpoint container.

Layout: ``MAGIC | uint64 header length | JSON header | raw array payload``.
The header lists every array (name, dtype, shape, offset) and carries a
sha256 checksum of the payload, so truncation and corruption are detected.
"""
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError

MAGIC = b"REIDCKPT"
FORMAT_VERSION = 1


def save_container(path, kind, meta, arrays):
    """Write ``arrays`` (name -> ndarray) plus JSON-serialisable ``meta``."""
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "arrays": entries,
        "checksum": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)
    return header["checksum"]


def load_container(path, kind=None):
    """Read a container; returns ``(meta, arrays, checksum)``."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    try:
        (hlen,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
        start = len(MAGIC) + 8
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc}); file truncated or corrupt") from exc
    if "format_version" not in header:
        raise CheckpointError(f"{path}: header lacks mandatory format_version")
    if header["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {header['format_version']}")
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {header.get('kind')!r}")
    payload = data[start + hlen:]
    actual = hashlib.sha256(payload).hexdigest()
    if actual != header["checksum"]:
        raise CheckpointError(f"{path}: checksum mismatch (header {header['checksum'][:16]}..., "
                              f"payload {actual[:16]}..., {len(payload)} payload bytes)")
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header["meta"], arrays, header["checksum"]


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
