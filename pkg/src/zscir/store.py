"""Binary record stores for tokens and image embeddings.

Both formats share the same little-endian layout: a header (magic, version,
vector width) followed by records of (id length u16, utf-8 id, float32
vector). Token stores use magic ``PWTK``, embedding manifests ``EMBV``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

TOKEN_MAGIC = b"PWTK"
EMBEDDING_MAGIC = b"EMBV"
_VERSION = 1
_HEADER = struct.Struct("<4sHI")
_ID_LEN = struct.Struct("<H")


def _write(path: str | Path, magic: bytes, dim: int,
           records: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(_HEADER.pack(magic, _VERSION, dim))
        for rid, vec in records.items():
            vec = np.asarray(vec, dtype="<f4")
            if vec.shape != (dim,):
                raise ParseError(
                    f"record {rid!r} has shape {vec.shape}, expected ({dim},)")
            rid_bytes = rid.encode("utf-8")
            f.write(_ID_LEN.pack(len(rid_bytes)))
            f.write(rid_bytes)
            f.write(vec.tobytes())


def _read(path: str | Path, magic: bytes) -> tuple[int, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ParseError(f"{path}: truncated header")
    got_magic, version, dim = _HEADER.unpack_from(data)
    if got_magic != magic:
        raise ParseError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != _VERSION:
        raise ParseError(f"{path}: unsupported version {version}")
    records: dict[str, np.ndarray] = {}
    off = _HEADER.size
    rec_bytes = 4 * dim
    while off < len(data):
        (id_len,) = _ID_LEN.unpack_from(data, off)
        off += _ID_LEN.size
        rid = data[off:off + id_len].decode("utf-8")
        off += id_len
        if off + rec_bytes > len(data):
            raise ParseError(f"{path}: truncated record {rid!r}")
        records[rid] = np.frombuffer(
            data, dtype="<f4", count=dim, offset=off).copy()
        off += rec_bytes
    return dim, records


def write_token_store(path: str | Path, tokens: dict[str, np.ndarray],
                      token_dim: int) -> None:
    _write(path, TOKEN_MAGIC, token_dim, tokens)


def read_token_store(path: str | Path) -> tuple[int, dict[str, np.ndarray]]:
    return _read(path, TOKEN_MAGIC)


def write_embeddings(path: str | Path, embeddings: dict[str, np.ndarray],
                     dim: int) -> None:
    _write(path, EMBEDDING_MAGIC, dim, embeddings)


def read_embeddings(path: str | Path) -> tuple[int, dict[str, np.ndarray]]:
    return _read(path, EMBEDDING_MAGIC)
