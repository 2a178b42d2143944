"""BM25 and dense cosine retrieval over knowledge instances."""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError
from .kb_store import KnowledgeBase, KnowledgeInstance, build_kb, normalize
from .utils import prepare_output

logger = logging.getLogger(__name__)

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
DEFAULT_DIM = 256
EMBEDDER_TAG = "fnv1a-char-bigram-v1"
SNAPSHOT_FORMAT = "knowledge-tuning-index"
SNAPSHOT_VERSION = 1

_FNV_OFFSET = 0x811C9DC5
_FNV_PRIME = 0x01000193

# One token per CJK codepoint; ASCII alphanumeric runs become word tokens.
_TOKEN = re.compile(
    r"[A-Za-z0-9]+"
    r"|[\u3040-\u30ff\u3100-\u312f\u3400-\u4dbf\u4e00-\u9fff\uac00-\ud7af\uf900-\ufaff"
    r"\U00020000-\U0002fa1f]"
)


def tokenize(text: str) -> List[str]:
    return [token.lower() for token in _TOKEN.findall(text or "")]


@dataclass(frozen=True)
class Bm25Index:
    postings: Mapping[str, Tuple[Tuple[int, int], ...]]
    doc_len: Tuple[int, ...]
    avgdl: float
    n_docs: int
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B

    @classmethod
    def from_texts(cls, texts: Sequence[str], k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> "Bm25Index":
        if not texts:
            raise DataError("Cannot build a BM25 index over an empty corpus")
        if k1 <= 0:
            raise DataError(f"k1 must be positive, got {k1}")
        if not 0.0 <= b <= 1.0:
            raise DataError(f"b must lie in [0, 1], got {b}")

        postings: Dict[str, List[Tuple[int, int]]] = {}
        doc_len: List[int] = []
        for doc_id, text in enumerate(texts):
            tokens = tokenize(text)
            doc_len.append(len(tokens))
            for token, tf in Counter(tokens).items():
                postings.setdefault(token, []).append((doc_id, tf))

        return cls(
            postings={token: tuple(entries) for token, entries in sorted(postings.items())},
            doc_len=tuple(doc_len),
            avgdl=sum(doc_len) / len(doc_len),
            n_docs=len(doc_len),
            k1=k1,
            b=b,
        )

    def idf(self, token: str) -> float:
        df = len(self.postings.get(token, ()))
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def term_weight(self, token: str, tf: int, doc_id: int) -> float:
        dl = self.doc_len[doc_id]
        denom = tf + self.k1 * (1.0 - self.b + self.b * dl / self.avgdl)
        return self.idf(token) * tf * (self.k1 + 1.0) / denom


def _query_terms(query: str) -> List[str]:
    # distinct tokens, first-occurrence order
    return list(dict.fromkeys(tokenize(query)))


def build_bm25(kb: KnowledgeBase, k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> Bm25Index:
    if not len(kb):
        raise DataError("Cannot build a BM25 index over an empty knowledge base")
    return Bm25Index.from_texts([inst.document_text() for inst in kb.instances], k1=k1, b=b)


def bm25_score(index: Bm25Index, query: str, doc_id: int) -> float:
    if not 0 <= doc_id < index.n_docs:
        raise DataError(f"Invalid document id {doc_id} (index holds {index.n_docs})")
    score = 0.0
    for token in _query_terms(query):
        for posted_id, tf in index.postings.get(token, ()):
            if posted_id == doc_id:
                score += index.term_weight(token, tf, doc_id)
                break
    return score


def bm25_scores(index: Bm25Index, query: str) -> np.ndarray:
    scores = np.zeros(index.n_docs, dtype=np.float64)
    for token in _query_terms(query):
        for doc_id, tf in index.postings.get(token, ()):
            scores[doc_id] += index.term_weight(token, tf, doc_id)
    return scores


def _rank(ids: np.ndarray, scores: np.ndarray, k: int) -> List[Tuple[int, float]]:
    order = np.lexsort((ids, -scores))[:k]
    return [(int(ids[i]), float(scores[i])) for i in order]


def bm25_retrieve(index: Bm25Index, query: str, k: int) -> List[Tuple[int, float]]:
    if k < 1:
        raise DataError(f"k must be at least 1, got {k}")
    scores = bm25_scores(index, query)
    positive = np.flatnonzero(scores > 0)
    return _rank(positive, scores[positive], k)


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    degenerate: bool = False


Embedder = Callable[[str, int], Embedding]


def fnv1a_32(data: bytes) -> int:
    value = _FNV_OFFSET
    for byte in data:
        value ^= byte
        value = (value * _FNV_PRIME) & 0xFFFFFFFF
    return value


def embed(text: str, dim: int = DEFAULT_DIM) -> Embedding:
    """Hashed character-bigram counts of the normalized text, L2-normalized."""
    if dim < 2:
        raise DataError(f"Embedding dimension must be at least 2, got {dim}")
    chars = normalize(text)
    vector = np.zeros(dim, dtype=np.float64)
    for i in range(len(chars) - 1):
        vector[fnv1a_32(chars[i : i + 2].encode("utf-8")) % dim] += 1.0
    norm = np.linalg.norm(vector)
    if norm == 0.0:
        return Embedding(vector=vector, degenerate=True)
    return Embedding(vector=vector / norm)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DataError(f"Dimension mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DataError("Cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


@dataclass(frozen=True)
class EmbeddingIndex:
    ids: np.ndarray
    vectors: np.ndarray
    dim: int
    embedder_tag: str = EMBEDDER_TAG

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_vectors(cls, ids: Sequence[int], vectors: np.ndarray, embedder_tag: str = EMBEDDER_TAG) -> "EmbeddingIndex":
        matrix = np.asarray(vectors, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(ids):
            raise DataError("Vectors must form an (n, dim) matrix aligned with ids")
        norms = np.linalg.norm(matrix, axis=1)
        if np.any(norms == 0.0):
            raise DataError("Zero vectors cannot be indexed")
        return cls(
            ids=np.asarray(ids, dtype=np.int64),
            vectors=matrix / norms[:, None],
            dim=matrix.shape[1],
            embedder_tag=embedder_tag,
        )


def build_embedding_index(
    kb: KnowledgeBase,
    dim: int = DEFAULT_DIM,
    embedder: Optional[Embedder] = None,
    embedder_tag: str = EMBEDDER_TAG,
) -> EmbeddingIndex:
    embed_fn = embedder or embed
    ids: List[int] = []
    rows: List[np.ndarray] = []
    for inst in kb.instances:
        emb = embed_fn(inst.document_text(), dim)
        if emb.degenerate:
            logger.warning("Skipping knowledge instance %d: degenerate embedding", inst.id)
            continue
        ids.append(inst.id)
        rows.append(emb.vector)
    if not rows:
        raise DataError("No knowledge instance produced a usable embedding")
    return EmbeddingIndex.from_vectors(ids, np.vstack(rows), embedder_tag=embedder_tag)


def dense_search(index: EmbeddingIndex, vector: np.ndarray, k: int) -> List[Tuple[int, float]]:
    if k < 1:
        raise DataError(f"k must be at least 1, got {k}")
    if not len(index):
        raise DataError("Dense index is empty")
    query = np.asarray(vector, dtype=np.float64)
    if query.shape != (index.dim,):
        raise DataError(f"Query dimension {query.shape} does not match index dimension {index.dim}")
    norm = np.linalg.norm(query)
    if norm == 0.0:
        raise DataError("Degenerate query embedding")
    sims = np.clip(index.vectors @ (query / norm), -1.0, 1.0)
    return _rank(index.ids, sims, k)


def dense_retrieve(
    index: EmbeddingIndex,
    query: str,
    k: int,
    embedder: Optional[Embedder] = None,
) -> List[Tuple[int, float]]:
    emb = (embedder or embed)(query, index.dim)
    if emb.degenerate:
        raise DataError(f"Degenerate query embedding for {query!r}")
    return dense_search(index, emb.vector, k)


def save_snapshot(
    path: Path,
    kb: KnowledgeBase,
    bm25: Optional[Bm25Index] = None,
    dense: Optional[EmbeddingIndex] = None,
) -> Path:
    """Write the KB and its indices to a versioned JSON snapshot."""
    payload: Dict[str, object] = {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "kb": {"source": kb.source, "instances": [{"id": k.id, **k.to_dict()} for k in kb.instances]},
    }
    if bm25 is not None:
        payload["bm25"] = {
            "k1": bm25.k1,
            "b": bm25.b,
            "doc_len": list(bm25.doc_len),
            "postings": {token: [list(p) for p in entries] for token, entries in bm25.postings.items()},
        }
    if dense is not None:
        payload["dense"] = {
            "dim": dense.dim,
            "embedder_tag": dense.embedder_tag,
            "ids": dense.ids.tolist(),
            "vectors": dense.vectors.tolist(),
        }
    path = prepare_output(path)
    try:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(payload, handle, ensure_ascii=False)
    except OSError as exc:
        raise DataError(f"Cannot write snapshot '{path}': {exc}") from exc
    return path


def load_snapshot(path: Path) -> Tuple[KnowledgeBase, Optional[Bm25Index], Optional[EmbeddingIndex]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Missing index snapshot '{path}'.")
    try:
        with open(path, "r", encoding="utf-8") as handle:
            payload = json.load(handle)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path.name}: not a JSON snapshot: {exc.msg}") from exc

    if payload.get("format") != SNAPSHOT_FORMAT or payload.get("version") != SNAPSHOT_VERSION:
        raise DataError(
            f"{path.name}: unsupported snapshot {payload.get('format')!r} v{payload.get('version')!r}; "
            f"expected {SNAPSHOT_FORMAT!r} v{SNAPSHOT_VERSION}"
        )

    kb_payload = payload["kb"]
    kb = build_kb(
        [
            KnowledgeInstance(id=int(r["id"]), entity=r["entity"], attribute=r["attribute"], content=r["content"])
            for r in kb_payload["instances"]
        ],
        source=kb_payload.get("source", "unknown"),
    )

    bm25 = None
    if "bm25" in payload:
        section = payload["bm25"]
        doc_len = tuple(int(n) for n in section["doc_len"])
        bm25 = Bm25Index(
            postings={t: tuple((int(d), int(tf)) for d, tf in entries) for t, entries in section["postings"].items()},
            doc_len=doc_len,
            avgdl=sum(doc_len) / len(doc_len),
            n_docs=len(doc_len),
            k1=float(section["k1"]),
            b=float(section["b"]),
        )

    dense = None
    if "dense" in payload:
        section = payload["dense"]
        dense = EmbeddingIndex(
            ids=np.asarray(section["ids"], dtype=np.int64),
            vectors=np.asarray(section["vectors"], dtype=np.float64).reshape(len(section["ids"]), int(section["dim"])),
            dim=int(section["dim"]),
            embedder_tag=section["embedder_tag"],
        )
    return kb, bm25, dense
