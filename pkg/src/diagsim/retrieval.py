"""Corpus chunking, embedding index, and exact top-k cosine retrieval.

The index is an exhaustive scan over unit-normalized vectors: at the
scale of a reference corpus (thousands of chunks) exactness beats any
approximate structure. Token counting is whitespace-based on purpose; it
needs no tokenizer dependency and chunk sizes are budgets, not contracts.
"""

from __future__ import annotations

import json
import re
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gateway import EmbeddingVector

INDEX_FORMAT_VERSION = 1
DEFAULT_QUERY_CHAR_LIMIT = 8000


class RetrievalError(Exception):
    pass


class NormalizationError(RetrievalError):
    """Vector cannot be L2-normalized (zero or non-finite)."""


class DimensionMismatch(RetrievalError):
    pass


class IndexFormatError(RetrievalError):
    pass


@dataclass(frozen=True)
class CorpusChunk:
    id: int
    text: str
    token_count: int
    span: tuple[int, int]


@dataclass(frozen=True)
class RetrievedPassage:
    chunk: CorpusChunk
    score: float


_TOKEN_RE = re.compile(r"\S+")


def chunk_corpus(source: str, chunk_size: int = 512, overlap: int = 0) -> list[CorpusChunk]:
    """Greedy whitespace-token packing with a fixed back-step between chunks.

    Chunk i starts at token ``i * (chunk_size - overlap)`` and takes up to
    ``chunk_size`` tokens; tokens are never split. Spans are character
    offsets into ``source``, so each chunk's text is a verbatim slice.
    """
    if not source.strip():
        raise ValueError("source must be non-empty")
    if not 0 <= overlap < chunk_size:
        raise ValueError("require 0 <= overlap < chunk_size")
    tokens = list(_TOKEN_RE.finditer(source))
    step = chunk_size - overlap
    chunks = []
    start = 0
    while start < len(tokens):
        window = tokens[start : start + chunk_size]
        span = (window[0].start(), window[-1].end())
        chunks.append(
            CorpusChunk(
                id=len(chunks),
                text=source[span[0] : span[1]],
                token_count=len(window),
                span=span,
            )
        )
        start += step
    return chunks


def l2_normalize(values: Sequence[float] | np.ndarray) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.size == 0:
        raise NormalizationError("expected a non-empty 1-d vector")
    norm = float(np.linalg.norm(vec))
    if not np.isfinite(norm) or norm < 1e-12:
        raise NormalizationError("vector has no usable L2 norm")
    return vec / norm


def vector_values(embedded: EmbeddingVector | Sequence[float]) -> Sequence[float]:
    return embedded.values if isinstance(embedded, EmbeddingVector) else embedded


def quantize_unit(values: Sequence[float] | np.ndarray) -> np.ndarray:
    """Normalize and round to float32, the index's storage precision.

    Every vector entering the index or a query passes through this one
    function, so identical inputs stay bitwise identical, self-similarity
    is 1.0 to float64 accuracy, and persistence is lossless.
    """
    return l2_normalize(values).astype(np.float32)


EmbedFn = Callable[[str], "EmbeddingVector | Sequence[float]"]


class EmbeddingIndex:
    """Immutable chunk/vector store; rows are unit-norm, row i <-> chunk i."""

    def __init__(self, chunks: Sequence[CorpusChunk], matrix: np.ndarray, embed_model: str = ""):
        matrix = np.asarray(matrix, dtype=np.float32)
        if len(chunks) != matrix.shape[0]:
            raise DimensionMismatch("row count does not match chunk count")
        norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise NormalizationError("index rows must be unit-norm within 1e-6")
        self.chunks = tuple(chunks)
        self.matrix = matrix
        self.embed_model = embed_model
        # exact float64 renormalization factors for scoring
        self._row_norms = norms

    def __len__(self) -> int:
        return len(self.chunks)

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def save(self, prefix: str | Path) -> tuple[Path, Path]:
        """Write ``<prefix>.json`` manifest + ``<prefix>.f32`` row-major matrix."""
        prefix = Path(prefix)
        manifest_path = prefix.with_suffix(".json")
        matrix_path = prefix.with_suffix(".f32")
        manifest = {
            "version": INDEX_FORMAT_VERSION,
            "embed_model": self.embed_model,
            "dim": self.dim,
            "rows": len(self.chunks),
            "chunks": [
                {"id": c.id, "text": c.text, "token_count": c.token_count, "span": list(c.span)}
                for c in self.chunks
            ],
        }
        manifest_path.write_text(json.dumps(manifest, ensure_ascii=False), encoding="utf-8")
        matrix_path.write_bytes(self.matrix.astype("<f4").tobytes(order="C"))
        return manifest_path, matrix_path

    @classmethod
    def load(cls, prefix: str | Path) -> EmbeddingIndex:
        prefix = Path(prefix)
        try:
            manifest = json.loads(prefix.with_suffix(".json").read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise IndexFormatError(f"unreadable manifest: {exc}") from exc
        if manifest.get("version") != INDEX_FORMAT_VERSION:
            raise IndexFormatError(f"unsupported index version {manifest.get('version')!r}")
        rows, dim = manifest["rows"], manifest["dim"]
        raw = prefix.with_suffix(".f32").read_bytes()
        expected = rows * dim * 4
        if len(raw) != expected:
            raise IndexFormatError(f"matrix file is {len(raw)} bytes, expected {expected}")
        matrix = np.frombuffer(raw, dtype="<f4").reshape(rows, dim)
        chunks = [
            CorpusChunk(c["id"], c["text"], c["token_count"], tuple(c["span"]))
            for c in manifest["chunks"]
        ]
        return cls(chunks, matrix, manifest.get("embed_model", ""))


def build_index(chunks: Sequence[CorpusChunk], embed_fn: EmbedFn, embed_model: str = "") -> EmbeddingIndex:
    """Embed every chunk and assemble the normalized matrix.

    Any embedding failure aborts the build; no partial index escapes.
    """
    if not chunks:
        raise ValueError("chunks must be non-empty")
    rows = []
    dim: int | None = None
    for chunk in chunks:
        row = quantize_unit(vector_values(embed_fn(chunk.text)))
        if dim is None:
            dim = row.size
        elif row.size != dim:
            raise DimensionMismatch(f"chunk {chunk.id}: dim {row.size} != {dim}")
        rows.append(row)
    return EmbeddingIndex(chunks, np.vstack(rows), embed_model)


def retrieve_top_k(index: EmbeddingIndex, query: str, k: int, embed_fn: EmbedFn) -> list[RetrievedPassage]:
    """Exact top-k by cosine, ties broken by ascending chunk id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        raise ValueError("index is empty")
    qw = quantize_unit(vector_values(embed_fn(query)))
    if qw.size != index.dim:
        raise DimensionMismatch(f"query dim {qw.size} != index dim {index.dim}")
    q = l2_normalize(qw)
    scores = (index.matrix.astype(np.float64) @ q) / index._row_norms
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.chunks[i].id))
    return [RetrievedPassage(index.chunks[i], float(scores[i])) for i in order[: min(k, len(index))]]


def build_retrieval_query(transcript, max_chars: int = DEFAULT_QUERY_CHAR_LIMIT) -> str:
    """Concatenate client turns, newest-preserving truncation to ``max_chars``.

    Therapist turns are excluded: they paraphrase the instrument itself
    and would pull retrieval toward the questionnaire instead of the
    client's symptoms.
    """
    contents = [t.content for t in transcript.turns if t.speaker == "client"]
    if not contents:
        raise ValueError("transcript has no client turns")
    query = "\n".join(contents)
    if len(query) <= max_chars:
        return query
    cut = len(query) - max_chars
    boundary = query.find(" ", cut)
    if boundary == -1:
        boundary = cut
    return query[boundary:].lstrip()
