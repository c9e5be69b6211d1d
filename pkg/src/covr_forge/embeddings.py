"""Embedding storage, similarity conventions, and a deterministic toy embedder.

Two similarity scales coexist and are never mixed implicitly: raw cosine in
[-1, 1] (used inside the contrastive loss) and normalized similarity
(1 + cos) / 2 in [0, 1] (used by every filter threshold). Vectors are
unit-normalized once, at insertion or load, so all downstream dot products
are cosines.

The on-disk CVEM format is bit-exact: magic ``CVEM``, u32 LE version (=1),
u32 LE dim, u64 LE count, then per record a u16 LE id byte-length, the UTF-8
id bytes, and dim little-endian f32 components. Frame embeddings use ids of
the form ``<video_id>#<frame_index>`` (0-based).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

MAGIC = b"CVEM"
VERSION = 1

# Vectors already unit-norm to this tolerance are kept bit-identical at load,
# which makes save -> load a fixed point.
_RENORM_EPS = 1e-6


class EmbeddingError(Exception):
    """Raised for malformed embedding files or inconsistent vectors."""


def frame_id(video_id: str, frame_index: int) -> str:
    return f"{video_id}#{frame_index}"


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Raw cosine of two unit vectors (their dot product)."""
    if u.shape != v.shape:
        raise EmbeddingError(f"dimension mismatch: {u.shape} vs {v.shape}")
    return float(np.dot(u.astype(np.float64), v.astype(np.float64)))


def normalized_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine mapped affinely onto [0, 1]: (1 + cos) / 2."""
    return (1.0 + cosine(u, v)) / 2.0


def _normalize(vec: np.ndarray, label: str) -> np.ndarray:
    vec64 = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(vec64))
    if norm < 1e-12:
        raise EmbeddingError(f"zero-norm vector for {label!r}")
    if abs(norm - 1.0) <= _RENORM_EPS:
        return np.asarray(vec, dtype=np.float32)
    return (vec64 / norm).astype(np.float32)


@dataclass
class EmbeddingStore:
    """id -> unit-norm float32 vector table of a fixed dimension."""

    dim: int
    table: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.table)

    def __contains__(self, key: str) -> bool:
        return key in self.table

    def ids(self) -> list[str]:
        return list(self.table)

    def add(self, key: str, vec: np.ndarray) -> None:
        vec = np.asarray(vec)
        if vec.shape != (self.dim,):
            raise EmbeddingError(f"vector for {key!r} has shape {vec.shape}, expected ({self.dim},)")
        if key in self.table:
            raise EmbeddingError(f"duplicate id: {key!r}")
        self.table[key] = _normalize(vec, key)

    def get(self, key: str) -> np.ndarray:
        try:
            return self.table[key]
        except KeyError:
            raise EmbeddingError(f"missing embedding for {key!r}") from None

    def similarity(self, a: str, b: str) -> float:
        """Normalized similarity between two stored ids."""
        return normalized_similarity(self.get(a), self.get(b))


def save_embeddings(store: EmbeddingStore, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIQ", VERSION, store.dim, len(store.table)))
        for key, vec in store.table.items():
            id_bytes = key.encode("utf-8")
            if len(id_bytes) > 0xFFFF:
                raise EmbeddingError(f"id too long: {key[:40]!r}...")
            fh.write(struct.pack("<H", len(id_bytes)))
            fh.write(id_bytes)
            fh.write(np.asarray(vec, dtype="<f4").tobytes())


def load_embeddings(path: str | Path) -> EmbeddingStore:
    path = Path(path)
    data = path.read_bytes()
    view = memoryview(data)
    if len(data) < 4 or bytes(view[:4]) != MAGIC:
        raise EmbeddingError(f"{path}: bad magic")
    if len(data) < 20:
        raise EmbeddingError(f"{path}: truncated header")
    version, dim, count = struct.unpack_from("<IIQ", data, 4)
    if version != VERSION:
        raise EmbeddingError(f"{path}: unsupported version {version}")
    store = EmbeddingStore(dim=dim)
    offset = 20
    vec_bytes = 4 * dim
    for _ in range(count):
        if offset + 2 > len(data):
            raise EmbeddingError(f"{path}: truncated file")
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if offset + id_len + vec_bytes > len(data):
            raise EmbeddingError(f"{path}: truncated file")
        key = bytes(view[offset : offset + id_len]).decode("utf-8")
        offset += id_len
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).copy()
        offset += vec_bytes
        store.add(key, vec)
    return store


def _token_vector(token: str, dim: int) -> np.ndarray:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    seed = int.from_bytes(digest, "little")
    rng = np.random.Generator(np.random.PCG64(seed))
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


def toy_embed(text: str, dim: int) -> np.ndarray:
    """Deterministic hash-based bag-of-tokens unit vector.

    Each token maps to a fixed pseudo-random direction, so texts sharing more
    tokens have higher expected cosine. Useful as a stand-in for external
    encoders in tests and toy pipelines.
    """
    if dim < 2:
        raise EmbeddingError("toy_embed requires dim >= 2")
    from .corpus import normalize_caption

    tokens = normalize_caption(text)
    if not tokens:
        return _token_vector("", dim).astype(np.float32)
    acc = np.zeros(dim, dtype=np.float64)
    for token in tokens:
        acc += _token_vector(token, dim)
    norm = np.linalg.norm(acc)
    if norm < 1e-12:
        return _token_vector("", dim).astype(np.float32)
    return (acc / norm).astype(np.float32)


class TextEmbedder:
    """Resolves text -> embedding either from a store or via toy_embed.

    Pipelines embed captions and generated modification texts through one of
    these; the toy variant lets the whole pipeline run without external
    encoder outputs.
    """

    def __init__(self, dim: int, store: EmbeddingStore | None = None):
        self.dim = dim
        self.store = store
        if store is not None and store.dim != dim:
            raise EmbeddingError(f"text store dim {store.dim} != configured dim {dim}")

    def embed(self, text: str) -> np.ndarray:
        if self.store is not None:
            return self.store.get(text)
        return toy_embed(text, self.dim)


def store_from_texts(texts: Iterable[str], dim: int) -> EmbeddingStore:
    """Build a store of toy embeddings keyed by the texts themselves."""
    store = EmbeddingStore(dim=dim)
    for text in texts:
        if text not in store:
            store.add(text, toy_embed(text, dim))
    return store
