"""Answering head and the loss-gap machinery.

The reader scores every answer from the fused (question, image, knowledge)
encoding. Each retrieved entry is judged by the gap between the
knowledge-free cross-entropy and the with-knowledge one: the gap weights
that entry's reader loss through a sigmoid and labels its similarity for
the retriever through a tanh. Both uses treat the gap as a constant, so the
reader cannot game its own weighting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .knowledge import KnowledgeEntry
from .model import RetrieverReader, qik_input
from .retriever import KnowledgeIndex, top_t
from .encoder import MultiModalInput


@dataclass(frozen=True)
class AnswerSpace:
    answers: tuple

    def __post_init__(self):
        if len(set(self.answers)) != len(self.answers):
            raise ValueError("answer space contains duplicates")
        object.__setattr__(
            self, "_lookup", {a: i for i, a in enumerate(self.answers)}
        )

    def __len__(self) -> int:
        return len(self.answers)

    def __getitem__(self, idx: int) -> str:
        return self.answers[idx]

    def index(self, answer: str) -> int:
        try:
            return self._lookup[answer]
        except KeyError:
            raise KeyError(f"answer {answer!r} not in answer space") from None

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for a in self.answers:
                fh.write(a + "\n")

    @classmethod
    def load(cls, path) -> "AnswerSpace":
        with open(path, encoding="utf-8") as fh:
            return cls(tuple(line.rstrip("\n") for line in fh if line.strip()))


class AnswerDistribution:
    def __init__(self, logits: T.Tensor):
        self.logits = logits

    def probabilities(self) -> np.ndarray:
        return T.softmax_kernel(self.logits.data)

    def argmax_index(self) -> int:
        return int(np.argmax(self.logits.data))


@dataclass(frozen=True)
class LossBundle:
    l_qik: tuple          # per retrieved entry
    l_qi: float
    delta: tuple          # per entry, l_qi - l_qik
    sigma_delta: tuple
    tanh_delta: tuple
    l_ret: float
    total: float

    def as_dict(self) -> dict:
        return {
            "l_qik": list(self.l_qik),
            "l_qi": self.l_qi,
            "delta": list(self.delta),
            "sigma_delta": list(self.sigma_delta),
            "tanh_delta": list(self.tanh_delta),
            "l_ret": self.l_ret,
            "total": self.total,
        }


def predict(qi: MultiModalInput, entry: KnowledgeEntry | None,
            model: RetrieverReader) -> AnswerDistribution:
    """Answer logits for the input, with the entry spliced in when given."""
    inp = qi if entry is None else qik_input(qi, entry.token_ids)
    pooled, _ = model.encode_reader(inp)
    return AnswerDistribution(model.answer_logits(pooled))


def cross_entropy(dist: AnswerDistribution, label: int) -> T.Tensor:
    n = dist.logits.data.shape[0]
    if not 0 <= label < n:
        raise IndexError(f"label {label} outside answer space of {n}")
    return T.neg(T.take(T.log_softmax(dist.logits), label))


def loss_gap(qi: MultiModalInput, entry: KnowledgeEntry, label: int,
             model: RetrieverReader):
    """(delta, with-knowledge CE, knowledge-free CE) for one entry.

    The knowledge-free forward never feeds gradients, so it runs outside
    the graph entirely.
    """
    l_qik = cross_entropy(predict(qi, entry, model), label)
    with T.no_grad():
        l_qi = float(cross_entropy(predict(qi, None, model), label).data)
    delta = l_qi - float(l_qik.data)
    return delta, l_qik, l_qi


def weighted_reader_loss(delta: float, l_qik: T.Tensor,
                         binary: bool = False) -> T.Tensor:
    """Scale the with-knowledge CE by the gap weight, held constant.

    Smooth mode uses the sigmoid of the gap; the binary ablation keeps the
    instance fully (gap > 0) or drops it."""
    if binary:
        weight = 1.0 if delta > 0.0 else 0.0
    else:
        weight = float(T.sigmoid_kernel(np.asarray(float(delta))))
    return T.mul(l_qik, weight)


def combined_loss(weighted_losses: list, l_ret: T.Tensor | None,
                  lam: float) -> T.Tensor:
    """Mean per-entry weighted reader loss plus the scaled retriever term."""
    if not weighted_losses:
        raise ValueError("combined_loss: no reader losses")
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    reader_term = T.mean(T.stack_scalars(list(weighted_losses)))
    if lam == 0.0 or l_ret is None:
        return reader_term
    return T.add(reader_term, T.mul(l_ret, float(lam)))


def infer(qi: MultiModalInput, index: KnowledgeIndex, model: RetrieverReader,
          kb, answers: AnswerSpace):
    """Top-1 retrieval, one with-knowledge forward, argmax."""
    with T.no_grad():
        pooled, _ = model.encode_query(qi)
        result = top_t(index, pooled.data, 1)
        entry = kb[result.entry_ids[0]]
        dist = predict(qi, entry, model)
    idx = dist.argmax_index()
    return answers[idx], result.entry_ids[0], dist
