"""Contextual-embedding backends and the on-disk embedding cache."""

from __future__ import annotations

import hashlib
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .corpus import Occurrence
from .errors import BackendError, ParseError

CACHE_MAGIC = b"CFEC"
CACHE_VERSION = 1
_DOC_ID_WIDTH = 64


@dataclass(frozen=True)
class ContextualEmbedding:
    occurrence: Occurrence
    vector: np.ndarray
    truncated: bool = False


class EmbeddingBackend(ABC):
    """Produces a fixed-dimension vector for a word occurrence in context."""

    name: str
    dim: int
    deterministic: bool
    max_context: int | None = None

    @abstractmethod
    def embed(self, occ: Occurrence) -> ContextualEmbedding:
        raise NotImplementedError

    def embed_many(self, occs) -> list[ContextualEmbedding]:
        return [self.embed(o) for o in occs]


def _hash_vector(seed: int, tag: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}|{tag}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
    return rng.standard_normal(dim)


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


class ToyEmbeddingBackend(EmbeddingBackend):
    """Deterministic hash-seeded embeddings for hermetic testing.

    Every word gets a static unit vector derived from a seeded hash of its
    surface form.  Words listed in ``attribute_pairs`` instead share a
    per-pair base vector (plus a small idiosyncratic component) and are
    displaced by ``+signal`` / ``-signal`` along a fixed attribute axis,
    so the two pair members sit on opposite sides of a planted direction.
    The context contributes a fixed-weight mixture of the static vectors
    of the window tokens, so identical (word, context) inputs always map
    to identical vectors while distinct contexts separate.
    """

    deterministic = True

    def __init__(self, dim: int = 32, attribute_pairs=(), signal: float = 1.5,
                 context_weight: float = 0.2, noise: float = 0.1, seed: int = 0,
                 max_context: int | None = None, name: str = "toy"):
        self.name = name
        self.dim = dim
        self.signal = signal
        self.context_weight = context_weight
        self.noise = noise
        self.seed = seed
        self.max_context = max_context
        self.pairs = [(a.lower(), b.lower()) for a, b in attribute_pairs]
        self._side = {}
        for a, b in self.pairs:
            self._side[a] = (f"{a}|{b}", +1.0)
            self._side[b] = (f"{a}|{b}", -1.0)
        self.axis = _unit(_hash_vector(seed, "axis", dim))
        self._static_cache: dict[str, np.ndarray] = {}

    def static_vector(self, word: str) -> np.ndarray:
        key = word.lower()
        cached = self._static_cache.get(key)
        if cached is not None:
            return cached
        if key in self._side:
            pair_tag, sign = self._side[key]
            base = _unit(_hash_vector(self.seed, f"pair:{pair_tag}", self.dim))
            idio = self.noise * _hash_vector(self.seed, f"idio:{key}", self.dim)
            vec = _unit(base + idio) + sign * self.signal * self.axis
        else:
            vec = _unit(_hash_vector(self.seed, f"word:{key}", self.dim))
        self._static_cache[key] = vec
        return vec

    def embed(self, occ: Occurrence) -> ContextualEmbedding:
        context = occ.context
        truncated = False
        if self.max_context is not None and len(context) > self.max_context:
            half = self.max_context // 2
            start = max(0, min(occ.center - half, len(context) - self.max_context))
            context = context[start:start + self.max_context]
            truncated = True
        vec = self.static_vector(occ.word).copy()
        if context and self.context_weight:
            mix = np.mean([self.static_vector(t) for t in context], axis=0)
            vec += self.context_weight * mix
        if not np.all(np.isfinite(vec)):
            raise BackendError(f"non-finite embedding for {occ.word!r}")
        return ContextualEmbedding(occ, vec, truncated)


def embedding_matrix(embeddings) -> np.ndarray:
    return np.stack([e.vector for e in embeddings])


def save_embedding_cache(path, backend_name: str, dim: int, records) -> None:
    """Write embeddings as a fixed-width binary cache.

    Header: magic, version, backend name, dimension, record count.
    Records: 64-byte document id, uint32 token index, float64 vector.
    """
    records = list(records)
    name_bytes = backend_name.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<HH", CACHE_VERSION, len(name_bytes)))
        fh.write(name_bytes)
        fh.write(struct.pack("<IQ", dim, len(records)))
        for doc_id, token_index, vector in records:
            doc_bytes = doc_id.encode("utf-8")
            if len(doc_bytes) > _DOC_ID_WIDTH:
                raise ParseError(f"document id too long for cache: {doc_id!r}")
            vector = np.asarray(vector, dtype=np.float64)
            if vector.shape != (dim,):
                raise ParseError(f"vector for {doc_id!r} has wrong dimension")
            fh.write(doc_bytes.ljust(_DOC_ID_WIDTH, b"\0"))
            fh.write(struct.pack("<I", token_index))
            fh.write(vector.tobytes())


def load_embedding_cache(path):
    """Read a cache written by save_embedding_cache.

    Returns (backend_name, dim, records) with records as
    (doc_id, token_index, vector) tuples.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(CACHE_MAGIC))
        if magic != CACHE_MAGIC:
            raise ParseError(f"not an embedding cache: {path}")
        version, name_len = struct.unpack("<HH", fh.read(4))
        if version != CACHE_VERSION:
            raise ParseError(f"unsupported cache version {version}")
        backend_name = fh.read(name_len).decode("utf-8")
        dim, count = struct.unpack("<IQ", fh.read(12))
        records = []
        record_size = _DOC_ID_WIDTH + 4 + 8 * dim
        for _ in range(count):
            blob = fh.read(record_size)
            if len(blob) != record_size:
                raise ParseError(f"truncated embedding cache: {path}")
            doc_id = blob[:_DOC_ID_WIDTH].rstrip(b"\0").decode("utf-8")
            (token_index,) = struct.unpack("<I", blob[_DOC_ID_WIDTH:_DOC_ID_WIDTH + 4])
            vector = np.frombuffer(blob[_DOC_ID_WIDTH + 4:], dtype=np.float64).copy()
            records.append((doc_id, token_index, vector))
    return backend_name, dim, records
