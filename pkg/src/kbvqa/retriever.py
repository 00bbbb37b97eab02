"""Dense retrieval: encode the knowledge base into a vector index, rank
entries by cosine similarity against the query-side encoding, and regress
the selected similarities onto tanh of the loss gap.

Candidate selection happens on plain arrays (no gradients); the similarities
that enter the training loss are recomputed through the graph for just the
selected entries, so a stale index only affects which entries are picked.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import EncoderParameters, MultiModalInput, encode, encode_text_batch
from .knowledge import KnowledgeBase


@dataclass
class KnowledgeIndex:
    matrix: np.ndarray          # (N, d), row i belongs to entry id i
    version: int = 0
    norms: np.ndarray = None    # (N,) cached row norms

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValueError(f"index matrix must be 2-D, got {self.matrix.shape}")
        if self.norms is None:
            self.norms = np.linalg.norm(self.matrix, axis=1)

    def __len__(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class RetrievalResult:
    entry_ids: tuple
    scores: tuple

    def __post_init__(self):
        if len(self.entry_ids) < 1:
            raise ValueError("retrieval result must hold at least one entry")


def cosine_sim(h_qi: T.Tensor, h_k: T.Tensor) -> T.Tensor:
    """Differentiable cosine similarity of two vectors, clamped to [-1, 1]."""
    a, b = h_qi.data, h_k.data
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"cosine_sim: shapes {a.shape} and {b.shape}")
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        raise FloatingPointError("cosine_sim: zero-norm vector")
    raw = float(a @ b) / (na * nb)
    clipped = min(1.0, max(-1.0, raw))

    def vjp(g):
        if raw != clipped:  # saturated by the clamp
            return (np.zeros_like(a), np.zeros_like(b))
        scale = float(g) / (na * nb)
        ga = scale * (b - (raw * nb / na) * a)
        gb = scale * (a - (raw * na / nb) * b)
        return (ga, gb)

    return T._make(np.asarray(clipped), (h_qi, h_k), vjp)


def similarity_row(index: KnowledgeIndex, query: np.ndarray) -> np.ndarray:
    """Cosine of the query against every index row, on plain arrays."""
    qn = np.linalg.norm(query)
    if qn == 0.0:
        raise FloatingPointError("similarity_row: zero-norm query")
    if np.any(index.norms == 0.0):
        raise FloatingPointError("similarity_row: zero-norm index row")
    return np.clip((index.matrix @ query) / (index.norms * qn), -1.0, 1.0)


def top_t(index: KnowledgeIndex, query: np.ndarray, t: int) -> RetrievalResult:
    """Select the t best entries; ties go to the lower entry id."""
    n = len(index)
    if not 1 <= t <= n:
        raise ValueError(f"t={t} outside [1, {n}]")
    sims = similarity_row(index, query)
    # stable sort on negated scores keeps lower ids first among equals
    order = np.argsort(-sims, kind="stable")[:t]
    return RetrievalResult(
        entry_ids=tuple(int(i) for i in order),
        scores=tuple(float(sims[i]) for i in order),
    )


def build_index(kb: KnowledgeBase, params: EncoderParameters,
                version: int = 0) -> KnowledgeIndex:
    if len(kb) == 0:
        raise ValueError("build_index: empty knowledge base, retrieval impossible")
    matrix = encode_text_batch([e.token_ids for e in kb], params)
    if not np.all(np.isfinite(matrix)):
        raise FloatingPointError("build_index: non-finite entry encoding")
    return KnowledgeIndex(matrix=matrix, version=version)


def retrieve(qi: MultiModalInput, index: KnowledgeIndex, t: int,
             params: EncoderParameters) -> RetrievalResult:
    """Encode the query side and rank; selection only, no gradients."""
    with T.no_grad():
        pooled, _ = encode(qi, params)
    return top_t(index, pooled.data, t)


def retriever_loss(delta, scores, binary: bool = False) -> T.Tensor:
    """Mean squared gap between the pseudo relevance label and each
    similarity. The label is a constant: tanh(delta), or its sign when the
    binary ablation is active."""
    if isinstance(scores, T.Tensor):
        count = scores.data.shape[0]
        stacked = scores
    else:
        count = len(scores)
        stacked = T.stack_scalars(list(scores)) if count else None
    if count == 0:
        raise ValueError("retriever_loss: no retrieved scores")
    d = float(delta.data) if isinstance(delta, T.Tensor) else float(delta)
    if binary:
        target = 1.0 if d >= 0.0 else -1.0
    else:
        target = math.tanh(d)
    return T.mean(T.square(T.sub_from(target, stacked)))


def save_index(index: KnowledgeIndex, path) -> None:
    """Raw binary dump: int64 N and d, then the row-major float64 matrix."""
    n, d = index.matrix.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<qq", n, d))
        fh.write(np.ascontiguousarray(index.matrix).tobytes())


def load_index(path) -> KnowledgeIndex:
    with open(path, "rb") as fh:
        n, d = struct.unpack("<qq", fh.read(16))
        matrix = np.frombuffer(fh.read(n * d * 8), dtype=np.float64)
    return KnowledgeIndex(matrix=matrix.reshape(n, d).copy())


def write_trace(path, rows) -> None:
    """Retrieval trace CSV: question id, top-t entry ids, their scores."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("question_id,entry_ids,scores\n")
        for qid, ids, scores in rows:
            id_str = " ".join(str(i) for i in ids)
            sc_str = " ".join(f"{s:.10f}" for s in scores)
            fh.write(f"{qid},{id_str},{sc_str}\n")
