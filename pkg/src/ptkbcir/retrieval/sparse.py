"""BM25 over an in-memory inverted index."""

from __future__ import annotations

import bisect
import heapq
import json
import math
import re
from collections import Counter
from collections.abc import Iterable
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

from ..data import Document
from ..errors import ValidationError

TOKEN_RE = re.compile(r"[^\W_]+")

INDEX_MAGIC = b"PTKBCIR-BM25-INDEX"
INDEX_VERSION = 1

DEFAULT_K1 = 0.9
DEFAULT_B = 0.4


@lru_cache(maxsize=1)
def _stemmer():
    from nltk.stem import PorterStemmer

    return PorterStemmer()


@lru_cache(maxsize=200_000)
def _stem(term: str) -> str:
    return _stemmer().stem(term)


def tokenize(text: str, stem: bool = False) -> list[str]:
    """Lowercased maximal alphanumeric runs, Porter-stemmed when ``stem``."""
    terms = TOKEN_RE.findall(text.lower())
    if stem:
        terms = [_stem(t) for t in terms]
    return terms


@dataclass
class InvertedIndex:
    postings: dict[str, list[tuple[int, int]]] = field(default_factory=dict)
    doc_lengths: list[int] = field(default_factory=list)
    doc_ids: list[str] = field(default_factory=list)
    stem: bool = True

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)

    @property
    def avg_doc_length(self) -> float:
        return sum(self.doc_lengths) / len(self.doc_lengths) if self.doc_lengths else 0.0

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def tf(self, term: str, internal_id: int) -> int:
        plist = self.postings.get(term)
        if not plist:
            return 0
        i = bisect.bisect_left(plist, (internal_id, 0))
        if i < len(plist) and plist[i][0] == internal_id:
            return plist[i][1]
        return 0

    def internal_id(self, doc_id: str) -> int:
        try:
            return self._lookup[doc_id]
        except AttributeError:
            self._lookup = {d: i for i, d in enumerate(self.doc_ids)}
            return self._lookup[doc_id]

    def analyze(self, text: str) -> list[str]:
        return tokenize(text, self.stem)


def build_index(docs: Iterable[Document], stem: bool = True) -> InvertedIndex:
    index = InvertedIndex(stem=stem)
    seen = set()
    for doc in docs:
        if doc.doc_id in seen:
            raise ValidationError(f"duplicate doc id {doc.doc_id!r}")
        seen.add(doc.doc_id)
        internal = len(index.doc_ids)
        terms = tokenize(doc.text, stem)
        index.doc_ids.append(doc.doc_id)
        index.doc_lengths.append(len(terms))
        for term, tf in Counter(terms).items():
            index.postings.setdefault(term, []).append((internal, tf))
    return index


def idf(index: InvertedIndex, term: str) -> float:
    df = index.df(term)
    n = index.doc_count
    return math.log(1 + (n - df + 0.5) / (df + 0.5))


def _term_weight(tf: int, dl: int, avgdl: float, k1: float, b: float) -> float:
    return tf / (tf + k1 * (1 - b + b * dl / avgdl))


def bm25_score(
    index: InvertedIndex,
    query_terms: list[str],
    doc_id: str,
    k1: float = DEFAULT_K1,
    b: float = DEFAULT_B,
) -> float:
    """Score one document. Repeated query terms contribute once per occurrence."""
    internal = index.internal_id(doc_id)
    dl = index.doc_lengths[internal]
    avgdl = index.avg_doc_length
    score = 0.0
    for term in query_terms:
        if index.df(term) == 0:
            continue
        tf = index.tf(term, internal)
        if tf:
            score += idf(index, term) * _term_weight(tf, dl, avgdl, k1, b)
    return score


def search_sparse(
    index: InvertedIndex,
    query: str,
    k: int,
    k1: float = DEFAULT_K1,
    b: float = DEFAULT_B,
) -> list[tuple[str, float]]:
    """Top-``k`` documents with positive score; ties go to the smaller doc id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    avgdl = index.avg_doc_length
    scores: dict[int, float] = {}
    for term in index.analyze(query):
        plist = index.postings.get(term)
        if not plist:
            continue
        w = idf(index, term)
        for internal, tf in plist:
            dl = index.doc_lengths[internal]
            scores[internal] = scores.get(internal, 0.0) + w * _term_weight(tf, dl, avgdl, k1, b)
    ranked = heapq.nsmallest(
        k,
        ((-s, index.doc_ids[i]) for i, s in scores.items() if s > 0),
    )
    return [(doc_id, -neg) for neg, doc_id in ranked]


def dump_index(index: InvertedIndex) -> bytes:
    body = {
        "stem": index.stem,
        "doc_ids": index.doc_ids,
        "doc_lengths": index.doc_lengths,
        "postings": index.postings,
    }
    header = INDEX_MAGIC + b" %d\n" % INDEX_VERSION
    return header + json.dumps(body, separators=(",", ":"), sort_keys=True).encode("utf-8")


def save_index(index: InvertedIndex, path: str | Path) -> None:
    Path(path).write_bytes(dump_index(index))


def load_index(path: str | Path) -> InvertedIndex:
    with open(path, "rb") as f:
        header = f.readline().rstrip(b"\n")
        magic, _, version = header.partition(b" ")
        if magic != INDEX_MAGIC:
            raise ValidationError(f"{path} is not a BM25 index file")
        if int(version) != INDEX_VERSION:
            raise ValidationError(f"{path}: unsupported index version {version.decode()}")
        body = json.loads(f.read())
    return InvertedIndex(
        postings={t: [tuple(p) for p in plist] for t, plist in body["postings"].items()},
        doc_lengths=body["doc_lengths"],
        doc_ids=body["doc_ids"],
        stem=body["stem"],
    )
