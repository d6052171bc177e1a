"""Weight files: a JSON text header followed by a little-endian float32 payload.

Layout::

    ANISR-WEIGHTS 1\\n
    {"fingerprint": ..., "entries": [...], "payload_bytes": N, "crc32": C}\\n
    <N bytes of payload>

Each entry records ``name``, ``kind`` (param or buffer), ``shape`` and
``offset``/``nbytes`` into the payload. The CRC32 covers the payload only.
"""
from __future__ import annotations

import json
import os
import tempfile
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ANISR-WEIGHTS 1\n"


class WeightFormatError(ValueError):
    """The file is not a valid weight file (truncated, corrupt, bad header)."""


class IncompatibleWeightsError(ValueError):
    """The file was written for a different architecture."""


@dataclass
class ModelWeights:
    fingerprint: str
    params: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    buffers: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def __post_init__(self):
        overlap = set(self.params) & set(self.buffers)
        if overlap:
            raise ValueError(f"names used as both parameter and buffer: {sorted(overlap)}")

    def equals(self, other: "ModelWeights") -> bool:
        """Bit-wise equality of names, shapes and values."""
        if self.fingerprint != other.fingerprint:
            return False
        for mine, theirs in ((self.params, other.params), (self.buffers, other.buffers)):
            if list(mine) != list(theirs):
                return False
            for name in mine:
                a, b = np.asarray(mine[name], np.float32), np.asarray(theirs[name], np.float32)
                if a.shape != b.shape or a.tobytes() != b.tobytes():
                    return False
        return True


def encode_weights(w: ModelWeights) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for kind, table in (("param", w.params), ("buffer", w.buffers)):
        for name, arr in table.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"name": name, "kind": kind, "shape": list(np.shape(arr)),
                            "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    payload = b"".join(chunks)
    header = {"fingerprint": w.fingerprint, "dtype": "f32le", "entries": entries,
              "payload_bytes": len(payload), "crc32": zlib.crc32(payload)}
    return MAGIC + json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + payload


def decode_weights(blob: bytes, expected_fingerprint: str | None = None) -> ModelWeights:
    if not blob.startswith(MAGIC):
        raise WeightFormatError("missing weight-file magic")
    end = blob.find(b"\n", len(MAGIC))
    if end < 0:
        raise WeightFormatError("unterminated header")
    try:
        header = json.loads(blob[len(MAGIC):end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFormatError(f"unreadable header: {exc}") from exc
    payload = blob[end + 1:]
    if len(payload) != header.get("payload_bytes"):
        raise WeightFormatError(
            f"payload is {len(payload)} bytes, header declares {header.get('payload_bytes')}")
    if zlib.crc32(payload) != header.get("crc32"):
        raise WeightFormatError("payload checksum mismatch")
    if expected_fingerprint is not None and header["fingerprint"] != expected_fingerprint:
        raise IncompatibleWeightsError(
            f"weights built for {header['fingerprint']!r}, model is {expected_fingerprint!r}")
    out = ModelWeights(header["fingerprint"])
    for e in header["entries"]:
        chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
        count = int(np.prod(e["shape"], dtype=np.int64))
        if len(chunk) != 4 * count:
            raise WeightFormatError(f"entry {e['name']!r} has inconsistent size")
        arr = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(e["shape"])
        table = out.params if e["kind"] == "param" else out.buffers
        if e["name"] in table:
            raise WeightFormatError(f"duplicate entry {e['name']!r}")
        table[e["name"]] = arr
    return out


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write ``data`` to a temp file next to ``path`` and rename it into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_weights(w: ModelWeights, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, encode_weights(w))


def load_weights(path: str | os.PathLike, expected_fingerprint: str | None = None) -> ModelWeights:
    with open(path, "rb") as fh:
        blob = fh.read()
    return decode_weights(blob, expected_fingerprint)
