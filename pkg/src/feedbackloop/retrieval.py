"""Slide-corpus ingestion and deterministic TF-IDF retrieval.

The corpus is chunked into whitespace-token windows, indexed with term
frequency times ln(N/df), and queried by cosine similarity. Everything here
is a pure function of its inputs: the same corpus and query always produce
the same ranking, which is what lets retrieved slides stay fixed between
feedback rounds.

The index is built behind the small :class:`Vectorizer` protocol so an
embedding-backed provider could be swapped in via configuration without
touching callers.
"""

from __future__ import annotations

import hashlib
import math
import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

TermVector = dict[str, float]


class RetrievalError(Exception):
    """Raised for retrieval misuse, e.g. querying an empty index."""


class ChunkingConfigError(ValueError):
    """Raised when chunk_size/overlap parameters are unusable."""


@dataclass(frozen=True)
class SlideChunk:
    """One chunk of lecture-slide text, positioned within its source deck."""

    id: str
    source_deck: str
    ordinal: int
    text: str

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "source_deck": self.source_deck,
            "ordinal": self.ordinal,
            "text": self.text,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "SlideChunk":
        return cls(
            id=str(row["id"]),
            source_deck=row["source_deck"],
            ordinal=int(row["ordinal"]),
            text=row["text"],
        )


@dataclass(frozen=True)
class RetrievalResult:
    """Ranked chunk ids with scores, tagged with a fingerprint of the query text."""

    query_fingerprint: str
    ranked: tuple[tuple[str, float], ...]

    def chunk_ids(self) -> tuple[str, ...]:
        return tuple(chunk_id for chunk_id, _ in self.ranked)


def _strip_token_punctuation(token: str) -> str:
    start, end = 0, len(token)
    while start < end and unicodedata.category(token[start]).startswith("P"):
        start += 1
    while end > start and unicodedata.category(token[end - 1]).startswith("P"):
        end -= 1
    return token[start:end]


def tokenize(text: str) -> list[str]:
    """Lowercase tokens split on Unicode whitespace, with edge punctuation stripped."""
    tokens = []
    for raw in text.lower().split():
        token = _strip_token_punctuation(raw)
        if token:
            tokens.append(token)
    return tokens


def ingest_slides(
    documents: Sequence[tuple[str, str]],
    chunk_size: int,
    overlap: int,
) -> list[SlideChunk]:
    """Split (deck name, full text) documents into overlapping token windows.

    Windows start every ``chunk_size - overlap`` tokens; the window that first
    reaches a document's end is its last chunk, so a trailing partial chunk is
    kept when non-empty. Ordinals restart at 0 within each deck.
    """
    if chunk_size <= 0:
        raise ChunkingConfigError(f"chunk_size must be positive (got {chunk_size})")
    if overlap < 0 or overlap >= chunk_size:
        raise ChunkingConfigError(
            f"overlap must satisfy 0 <= overlap < chunk_size (got {overlap})")

    stride = chunk_size - overlap
    chunks: list[SlideChunk] = []
    for deck, text in documents:
        tokens = text.split()
        ordinal = 0
        position = 0
        while position < len(tokens):
            window = tokens[position:position + chunk_size]
            chunks.append(SlideChunk(
                id=f"{deck}#{ordinal:04d}",
                source_deck=deck,
                ordinal=ordinal,
                text=" ".join(window),
            ))
            ordinal += 1
            if position + chunk_size >= len(tokens):
                break
            position += stride
    return chunks


def load_slides(path: Path, chunk_size: int, overlap: int) -> list[SlideChunk]:
    """Read slides.jsonl: pre-chunked rows pass through, deck rows get chunked."""
    import json

    prechunked: list[SlideChunk] = []
    documents: list[tuple[str, str]] = []
    with path.open(encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if "ordinal" in row:
                prechunked.append(SlideChunk.from_dict(row))
            else:
                documents.append((row["deck"], row["text"]))
    return prechunked + ingest_slides(documents, chunk_size, overlap)


def term_frequencies(text: str) -> Counter:
    return Counter(tokenize(text))


def cosine_similarity(a: TermVector, b: TermVector) -> float:
    """Cosine of two sparse non-negative vectors; 0 when either norm is 0."""
    if len(b) < len(a):
        a, b = b, a
    dot = sum(weight * b.get(term, 0.0) for term, weight in a.items())
    norm_a = math.sqrt(sum(w * w for w in a.values()))
    norm_b = math.sqrt(sum(w * w for w in b.values()))
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0
    return min(1.0, dot / (norm_a * norm_b))


def query_fingerprint(query: str) -> str:
    return hashlib.sha256(query.encode("utf-8")).hexdigest()


class Vectorizer(Protocol):
    """Maps text to a sparse term vector under a fixed corpus weighting."""

    def vectorize(self, text: str) -> TermVector: ...


@dataclass(frozen=True)
class TfidfVectorizer:
    """TF-IDF weighting: term count times ln(N/df) from a fixed corpus."""

    document_frequency: dict[str, int]
    n_chunks: int

    def vectorize(self, text: str) -> TermVector:
        vector: TermVector = {}
        for term, count in term_frequencies(text).items():
            df = self.document_frequency.get(term)
            if not df:
                continue
            weight = count * math.log(self.n_chunks / df)
            if weight > 0.0:
                vector[term] = weight
        return vector


@dataclass(frozen=True)
class CorpusIndex:
    """Immutable per-chunk TF-IDF vectors plus the corpus document-frequency table."""

    chunks: dict[str, SlideChunk]
    vectors: dict[str, TermVector]
    vectorizer: TfidfVectorizer

    def __len__(self) -> int:
        return len(self.chunks)


def build_index(chunks: Iterable[SlideChunk]) -> CorpusIndex:
    """Index chunks with TF-IDF weights (terms in every chunk weigh zero)."""
    chunk_list = list(chunks)
    df: Counter = Counter()
    per_chunk_tf: dict[str, Counter] = {}
    for chunk in chunk_list:
        tf = term_frequencies(chunk.text)
        per_chunk_tf[chunk.id] = tf
        df.update(tf.keys())

    vectorizer = TfidfVectorizer(document_frequency=dict(df), n_chunks=len(chunk_list))
    vectors = {
        chunk.id: {
            term: weight
            for term, count in per_chunk_tf[chunk.id].items()
            if (weight := count * math.log(len(chunk_list) / df[term])) > 0.0
        }
        for chunk in chunk_list
    }
    return CorpusIndex(
        chunks={chunk.id: chunk for chunk in chunk_list},
        vectors=vectors,
        vectorizer=vectorizer,
    )


def retrieve_top_k(query: str, index: CorpusIndex, k: int) -> RetrievalResult:
    """The k most cosine-similar chunks to the query, ties broken by ascending id."""
    if k < 1:
        raise ValueError(f"k must be at least 1 (got {k})")
    if len(index) == 0:
        raise RetrievalError("cannot retrieve from an empty index; no slide corpus loaded")

    query_vector = index.vectorizer.vectorize(query)
    scored = sorted(
        ((chunk_id, cosine_similarity(query_vector, vector))
         for chunk_id, vector in index.vectors.items()),
        key=lambda item: (-item[1], item[0]),
    )
    return RetrievalResult(
        query_fingerprint=query_fingerprint(query),
        ranked=tuple(scored[:k]),
    )
