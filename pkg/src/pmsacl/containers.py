"""Named-record binary containers for checkpoints ("PMCK") and fitted patch
models ("PMDM"): magic, version byte, 32-byte config hash, record count,
(name, PMT1 tensor) records, then an optional JSON trailer to EOF."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .numerics import decode_tensor, encode_tensor

VERSION = 1
CHECKPOINT_MAGIC = b"PMCK"
PATCH_MODEL_MAGIC = b"PMDM"


def write_container(
    path: str | Path,
    magic: bytes,
    config_hash: bytes,
    records: dict[str, np.ndarray],
    trailer: dict | None = None,
) -> None:
    if len(magic) != 4:
        raise FormatError(f"magic must be 4 bytes, got {magic!r}")
    if len(config_hash) != 32:
        raise FormatError(f"config hash must be 32 bytes, got {len(config_hash)}")
    blob = bytearray()
    blob += magic
    blob += struct.pack("<B", VERSION)
    blob += config_hash
    blob += struct.pack("<I", len(records))
    for name, arr in records.items():
        encoded_name = name.encode("utf-8")
        if len(encoded_name) > 0xFFFF:
            raise FormatError(f"record name too long: {name[:32]}...")
        blob += struct.pack("<H", len(encoded_name))
        blob += encoded_name
        blob += encode_tensor(arr)
    if trailer is not None:
        blob += json.dumps(trailer, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(bytes(blob))


def read_container(
    path: str | Path,
    expect_magic: bytes,
) -> tuple[bytes, dict[str, np.ndarray], dict]:
    """Parse a container; returns (config_hash, records, trailer)."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"no such artifact {path}")
    buf = path.read_bytes()
    if len(buf) < 41:
        raise FormatError(f"{path.name}: truncated container header")
    magic = buf[:4]
    if magic != expect_magic:
        raise FormatError(
            f"{path.name}: wrong artifact type, expected magic {expect_magic!r} got {magic!r}"
        )
    version = buf[4]
    if version != VERSION:
        raise FormatError(f"{path.name}: unsupported container version {version}")
    config_hash = buf[5:37]
    (count,) = struct.unpack_from("<I", buf, 37)
    pos = 41
    records: dict[str, np.ndarray] = {}
    for i in range(count):
        name = f"#{i}"
        try:
            if len(buf) - pos < 2:
                raise FormatError("name length missing")
            (name_len,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            if len(buf) - pos < name_len:
                raise FormatError("name bytes missing")
            name = buf[pos : pos + name_len].decode("utf-8")
            pos += name_len
            arr, pos = decode_tensor(buf, pos)
        except FormatError as exc:
            raise FormatError(f"{path.name}: record {i} ({name}): {exc}") from exc
        records[name] = arr
    trailer_bytes = buf[pos:]
    if trailer_bytes.strip():
        try:
            trailer = json.loads(trailer_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path.name}: malformed JSON trailer: {exc}") from exc
    else:
        trailer = {}
    return config_hash, records, trailer
