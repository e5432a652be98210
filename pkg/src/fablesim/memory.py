"""Short/long-term role memory and embedding-based retrieval.

STM is a FIFO queue of raw observations; overflow evicts the oldest entries
into LTM as per-entry summaries indexed by their embeddings. Retrieval ranks
STM and LTM jointly by cosine similarity, newest first on ties.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .world import WorldviewSetting

logger = logging.getLogger(__name__)

DEFAULT_STM_CAPACITY = 15
DEFAULT_EMBED_DIM = 256


class EmbeddingError(Exception):
    """The embedding backend rejected the input or failed."""


class Embedder:
    """Embedding contract: fixed dimension, deterministic, unit-norm output."""

    dimension: int

    def embed(self, text: str) -> np.ndarray:
        raise NotImplementedError


class HashedNgramEmbedder(Embedder):
    """Deterministic bag-of-character-3-grams embedder for tests and offline runs.

    Each 3-gram hashes to one of `dimension` buckets; the count vector is
    L2-normalized. No model weights, no network, stable across processes.
    """

    def __init__(self, dimension: int = DEFAULT_EMBED_DIM) -> None:
        if dimension <= 0:
            raise ValueError("dimension must be positive")
        self.dimension = dimension

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise EmbeddingError("cannot embed empty text")
        grams = self._ngrams(text)
        vec = np.zeros(self.dimension, dtype=np.float64)
        for gram in grams:
            digest = hashlib.md5(gram.encode("utf-8")).digest()
            bucket = int.from_bytes(digest[:4], "big") % self.dimension
            vec[bucket] += 1.0
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise EmbeddingError(f"text produced no features: {text!r}")
        return vec / norm

    @staticmethod
    def _ngrams(text: str) -> list[str]:
        lowered = text.casefold()
        if len(lowered) < 3:
            return [lowered]
        return [lowered[i : i + 3] for i in range(len(lowered) - 2)]


class RemoteEmbedder(Embedder):
    """Embedding endpoint client: POST <base_url>/embeddings with a model id."""

    def __init__(self, base_url: str, model: str, dimension: int, api_key: str = "", timeout: float = 30.0) -> None:
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.dimension = dimension
        self.api_key = api_key
        self.timeout = timeout

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise EmbeddingError("cannot embed empty text")
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = requests.post(
                f"{self.base_url}/embeddings",
                json={"model": self.model, "input": [text]},
                headers=headers,
                timeout=self.timeout,
            )
            resp.raise_for_status()
            payload = resp.json()
            raw = payload["data"][0]["embedding"]
        except Exception as exc:
            raise EmbeddingError(f"embedding request failed: {exc}") from exc
        vec = np.asarray(raw, dtype=np.float64)
        if vec.shape != (self.dimension,):
            raise EmbeddingError(f"expected dimension {self.dimension}, got {vec.shape}")
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise EmbeddingError("backend returned a zero vector")
        return vec / norm


def rank_by_cosine(query_vec: np.ndarray, candidates: list[tuple[np.ndarray, int]], k: int) -> list[int]:
    """Indices of the top-k candidates by cosine; ties go to the higher recency key."""
    scored = []
    for idx, (vec, recency) in enumerate(candidates):
        sim = float(np.dot(query_vec, vec))
        scored.append((-sim, -recency, idx))
    scored.sort()
    return [idx for _, _, idx in scored[:k]]


@dataclass
class MemoryEntry:
    text: str
    scene: int
    kind: str  # "stm" or "ltm"
    seq: int
    embedding: np.ndarray = field(repr=False)


class MemoryStore:
    """FIFO short-term memory plus summarized, embedding-indexed long-term memory."""

    def __init__(self, embedder: Embedder, capacity: int = DEFAULT_STM_CAPACITY, summarizer=None) -> None:
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.embedder = embedder
        self.capacity = capacity
        self.summarizer = summarizer  # callable text -> summary; None keeps text verbatim
        self.stm: list[MemoryEntry] = []
        self.ltm: list[MemoryEntry] = []
        self._seq = 0

    def record(self, text: str, scene: int) -> MemoryEntry:
        """Append an observation; overflow consolidates the oldest into LTM."""
        if not text:
            raise ValueError("cannot record empty text")
        entry = MemoryEntry(text=text, scene=scene, kind="stm", seq=self._seq, embedding=self.embedder.embed(text))
        self._seq += 1
        self.stm.append(entry)
        if len(self.stm) > self.capacity:
            self.consolidate()
        return entry

    def consolidate(self, summarizer=None) -> int:
        """Move the oldest entries beyond capacity into LTM as summaries.

        All summaries are produced before anything moves, so a summarizer
        failure leaves the store unchanged. Returns the number moved.
        """
        overflow = len(self.stm) - self.capacity
        if overflow <= 0:
            return 0
        summarize = summarizer or self.summarizer or (lambda text: text)
        evicted = self.stm[:overflow]
        summaries = [summarize(entry.text) for entry in evicted]  # may raise; store untouched
        embeddings = [self.embedder.embed(s) for s in summaries]
        for entry, summary, vec in zip(evicted, summaries, embeddings):
            self.ltm.append(MemoryEntry(text=summary, scene=entry.scene, kind="ltm", seq=entry.seq, embedding=vec))
        self.stm = self.stm[overflow:]
        return overflow

    def entries(self) -> list[MemoryEntry]:
        return self.ltm + self.stm

    def retrieve(self, query: str, k: int) -> list[MemoryEntry]:
        """Top-k entries across STM and LTM by cosine; ties break newest-first."""
        if k <= 0:
            raise ValueError("k must be positive")
        pool = self.entries()
        if not pool:
            return []
        query_vec = self.embedder.embed(query)
        order = rank_by_cosine(query_vec, [(e.embedding, e.seq) for e in pool], k)
        return [pool[i] for i in order]

    def recent(self, n: int) -> list[MemoryEntry]:
        """The n newest STM entries in chronological order."""
        if n <= 0:
            return []
        return self.stm[-n:]


class SettingsIndex:
    """Retrieval index over worldview settings: term hits first, then cosine."""

    def __init__(self, settings: list[WorldviewSetting], embedder: Embedder) -> None:
        self.settings = list(settings)
        self.embedder = embedder
        self._detail_vecs: list[np.ndarray | None] = []
        for s in self.settings:
            self._detail_vecs.append(embedder.embed(s.detail) if s.detail else None)

    def match(self, context: str, k: int) -> list[WorldviewSetting]:
        if k <= 0:
            raise ValueError("k must be positive")
        if not context:
            raise ValueError("context must be non-empty")
        lowered = context.casefold()
        term_hits = [i for i, s in enumerate(self.settings) if s.term and s.term.casefold() in lowered]
        picked = term_hits[:k]
        if len(picked) < k:
            rest = [i for i in range(len(self.settings)) if i not in set(term_hits)]
            if rest:
                query_vec = self.embedder.embed(context)
                scored = []
                for i in rest:
                    vec = self._detail_vecs[i]
                    sim = float(np.dot(query_vec, vec)) if vec is not None else -1.0
                    scored.append((-sim, i))  # stable on input order for equal sims
                scored.sort()
                picked = picked + [i for _, i in scored[: k - len(picked)]]
        return [self.settings[i] for i in picked]


def match_settings(context: str, settings: list[WorldviewSetting], k: int, embedder: Embedder) -> list[WorldviewSetting]:
    """One-shot settings match; build a SettingsIndex for repeated queries."""
    return SettingsIndex(settings, embedder).match(context, k)


def build_embedder(config: dict | None) -> Embedder:
    """Embedder factory: {"kind": "hashed"|"remote", ...}; default is hashed."""
    config = config or {}
    kind = config.get("kind", "hashed")
    if kind == "hashed":
        return HashedNgramEmbedder(dimension=int(config.get("dimension", DEFAULT_EMBED_DIM)))
    if kind == "remote":
        import os

        return RemoteEmbedder(
            base_url=str(config["base_url"]),
            model=str(config.get("model", "")),
            dimension=int(config.get("dimension", DEFAULT_EMBED_DIM)),
            api_key=os.environ.get(str(config.get("api_key_env", "")), ""),
            timeout=float(config.get("timeout", 30.0)),
        )
    raise ValueError(f"unknown embedder kind {kind!r}")
