"""Exact inner-product search and the embedding client that feeds it."""

from __future__ import annotations

import logging
import os
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import httpx
import numpy as np

from ..cache import RecordCache, content_hash
from ..errors import GatewayError, ParseError, ValidationError
from ..http import post_json

logger = logging.getLogger(__name__)


class EmbeddingStore:
    """Document vectors held as one ``(n, dimension)`` float64 matrix.

    Rows are kept in ascending doc-id order, so a stable sort on score breaks
    ties by doc id for free.
    """

    def __init__(self, vectors: Mapping[str, Sequence[float]], dimension: int | None = None):
        self.doc_ids = sorted(vectors)
        if dimension is None:
            dimension = len(next(iter(vectors.values()))) if vectors else 0
        if vectors and dimension < 1:
            raise ValidationError("embedding dimension must be positive")
        self.dimension = dimension
        matrix = np.zeros((len(self.doc_ids), dimension), dtype=np.float64)
        for i, doc_id in enumerate(self.doc_ids):
            v = np.asarray(vectors[doc_id], dtype=np.float64)
            if v.shape != (dimension,):
                raise ValidationError(f"vector for {doc_id} has length {v.size}, expected {dimension}")
            matrix[i] = v
        if not np.isfinite(matrix).all():
            raise ValidationError("embedding store contains non-finite components")
        self.matrix = matrix

    def __len__(self) -> int:
        return len(self.doc_ids)

    def vector(self, doc_id: str) -> np.ndarray:
        return self.matrix[self.doc_ids.index(doc_id)]


def search_dense(store: EmbeddingStore, query_vector: Sequence[float], k: int) -> list[tuple[str, float]]:
    q = np.asarray(query_vector, dtype=np.float64)
    if q.shape != (store.dimension,):
        raise ValidationError(f"query vector has length {q.size}, store dimension is {store.dimension}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if not len(store):
        return []
    scores = store.matrix @ q
    order = np.argsort(-scores, kind="stable")[:k]
    return [(store.doc_ids[i], float(scores[i])) for i in order]


def parse_vectors(document: bytes | str) -> dict[str, list[float]]:
    text = document.decode("utf-8") if isinstance(document, bytes) else document
    vectors = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        doc_id, sep, values = line.partition("\t")
        if not sep:
            raise ParseError(f"line {lineno}", "expected doc_id<TAB>v1,v2,...")
        try:
            vectors[doc_id] = [float(x) for x in values.split(",")]
        except ValueError:
            raise ParseError(f"line {lineno}", "non-numeric vector component") from None
    return vectors


def write_vectors(vectors: Mapping[str, Sequence[float]]) -> bytes:
    lines = [f"{d}\t{','.join(repr(float(x)) for x in vectors[d])}\n" for d in sorted(vectors)]
    return "".join(lines).encode("utf-8")


def load_store(path: str | Path) -> EmbeddingStore:
    return EmbeddingStore(parse_vectors(Path(path).read_bytes()))


class EmbeddingClient:
    """Embeds texts through an HTTP endpoint, caching vectors by content hash.

    The endpoint receives ``{"model": ..., "input": [texts]}`` and must answer
    with ``{"data": [{"embedding": [...]}, ...]}`` in input order.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        cache_path: str | Path | None = None,
        api_key: str | None = None,
        retries: int = 4,
        backoff: float = 1.0,
        batch_size: int = 32,
        parallelism: int = 1,
        transport: httpx.BaseTransport | None = None,
        timeout: float = 60.0,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get("PTKBCIR_API_KEY", "")
        self.retries = retries
        self.backoff = backoff
        self.batch_size = batch_size
        self.parallelism = max(1, parallelism)
        self.cache = RecordCache(cache_path)
        self.dimension: int | None = None
        self.calls: list[str] = []
        self._http = httpx.Client(transport=transport, timeout=timeout)
        for rec in self.cache.values()[:1]:
            self.dimension = len(rec["vector"])

    def _key(self, text: str) -> str:
        return content_hash(self.model, text)

    def _check_dim(self, v: Sequence[float]) -> None:
        if self.dimension is None:
            self.dimension = len(v)
        elif len(v) != self.dimension:
            raise ValidationError(f"embedding dimension changed from {self.dimension} to {len(v)}")

    def _fetch(self, texts: list[str]) -> list[list[float]]:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        body = post_json(
            self._http,
            self.endpoint,
            {"model": self.model, "input": texts},
            headers=headers,
            retries=self.retries,
            backoff=self.backoff,
            counter=self.calls,
        )
        try:
            data = sorted(body["data"], key=lambda d: d.get("index", 0))
            vectors = [[float(x) for x in d["embedding"]] for d in data]
        except (KeyError, TypeError, ValueError) as e:
            raise GatewayError(f"malformed embedding response: {e}") from e
        if len(vectors) != len(texts):
            raise GatewayError(f"asked for {len(texts)} embeddings, got {len(vectors)}")
        return vectors

    def embed_texts(self, texts: Sequence[str]) -> list[list[float]]:
        missing = list(dict.fromkeys(t for t in texts if self._key(t) not in self.cache))
        batches = [missing[i : i + self.batch_size] for i in range(0, len(missing), self.batch_size)]
        if batches:
            with ThreadPoolExecutor(self.parallelism) as pool:
                results = list(pool.map(self._fetch, batches))
            # cache appends in input order keep the file byte-stable across runs
            for batch, vectors in zip(batches, results):
                for text, v in zip(batch, vectors):
                    self._check_dim(v)
                    self.cache.append({"key": self._key(text), "vector": v})
        out = []
        for t in texts:
            v = self.cache.get(self._key(t))["vector"]
            self._check_dim(v)
            out.append(v)
        return out
