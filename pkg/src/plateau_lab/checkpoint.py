"""Binary checkpoint format.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"PLAB"
    4       4     u32 format version (currently 1)
    8       32    sha256 of the embedded config text
    40      4     u32 number of sections
    44      ...   sections, each:
                    u16  name length, name (utf-8)
                    u64  payload length, payload
    end-4   4     u32 crc32 of every preceding byte

Sections: ``meta`` (utf-8 JSON: config text, counters, curriculum buffer,
CSV rows written so far) and ``.npy``-encoded arrays named
``params/<key>``, ``prox/<key>``, ``adam_m/<key>``, ``adam_v/<key>``,
``venv/<key>``. Arrays round-trip bitwise, dtype included.

Files are written to a temporary sibling, fsynced and renamed into place, so
a reader never sees a partially written checkpoint.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PLAB"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable checkpoint: bad magic, unsupported version, hash or CRC mismatch."""


@dataclass
class Checkpoint:
    config_text: str
    meta: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def config_hash(self) -> bytes:
        return hashlib.sha256(self.config_text.encode()).digest()

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}


def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def encode(ckpt: Checkpoint) -> bytes:
    meta = dict(ckpt.meta, config_text=ckpt.config_text)
    sections = [("meta", json.dumps(meta, sort_keys=True).encode())]
    sections += [(name, _npy_bytes(arr)) for name, arr in ckpt.arrays.items()]
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(ckpt.config_hash)
    out.write(struct.pack("<I", len(sections)))
    for name, payload in sections:
        nb = name.encode()
        out.write(struct.pack("<H", len(nb)))
        out.write(nb)
        out.write(struct.pack("<Q", len(payload)))
        out.write(payload)
    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def decode(data: bytes) -> Checkpoint:
    if len(data) < 48 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic or truncated)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    body, (crc,) = data[:-4], struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch (truncated or corrupted file)")
    stored_hash = body[8:40]
    (n_sections,) = struct.unpack_from("<I", body, 40)
    pos = 44
    meta, arrays = None, {}
    try:
        for _ in range(n_sections):
            (nlen,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2:pos + 2 + nlen].decode()
            pos += 2 + nlen
            (plen,) = struct.unpack_from("<Q", body, pos)
            payload = body[pos + 8:pos + 8 + plen]
            pos += 8 + plen
            if name == "meta":
                meta = json.loads(payload)
            else:
                arrays[name] = np.load(io.BytesIO(payload), allow_pickle=False)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed section table: {exc}") from exc
    if meta is None or pos != len(body):
        raise CheckpointError("malformed section table")
    config_text = meta.pop("config_text")
    ckpt = Checkpoint(config_text, meta, arrays)
    if ckpt.config_hash != stored_hash:
        raise CheckpointError("config hash does not match embedded config")
    return ckpt


def save(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(ckpt)
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
    return path


def load(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())
