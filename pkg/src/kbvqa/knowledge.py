"""Knowledge-base ingestion: triplet flattening, tokenization, vocabulary.

Triplets come in as (subject, relation, object) and are flattened to plain
lowercase sentences that the encoder consumes like any other text. The
vocabulary is a whitespace-token map with four reserved ids up front; it is
built once over the whole corpus (questions + flattened triplets + answers)
so that no in-domain token ever maps to UNK.
"""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

CLS_ID = 0
SEP_ID = 1
PAD_ID = 2
UNK_ID = 3
RESERVED_TOKENS = ("[CLS]", "[SEP]", "[PAD]", "[UNK]")
NUM_RESERVED = len(RESERVED_TOKENS)


def flatten_triplet(subject: str, relation: str, obj: str) -> str:
    """Join the three components into one lowercase sentence."""
    for name, part in (("subject", subject), ("relation", relation),
                       ("object", obj)):
        if not part or not part.strip():
            raise ValueError(f"flatten_triplet: empty {name}")
    joined = f"{subject} {relation} {obj}"
    return " ".join(joined.lower().split())


@dataclass(frozen=True)
class Vocabulary:
    id_to_token: tuple
    token_to_id: dict = field(repr=False)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.id_to_token[idx]

    def save(self, path) -> None:
        """One non-reserved token per line; line i holds the token of id i+4."""
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for tok in self.id_to_token[NUM_RESERVED:]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        return cls.from_tokens(tokens)

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "Vocabulary":
        ordered = RESERVED_TOKENS + tuple(tokens)
        mapping = {tok: i for i, tok in enumerate(ordered)}
        if len(mapping) != len(ordered):
            raise ValueError("vocabulary contains duplicate tokens")
        return cls(id_to_token=ordered, token_to_id=mapping)


def tokenize(sentence: str, vocab: Vocabulary) -> list[int]:
    """Whitespace split, lowercase, vocabulary lookup; unknowns become UNK."""
    return [vocab.lookup(tok) for tok in sentence.lower().split()]


def build_vocab(corpus: Iterable[str]) -> Vocabulary:
    counts: Counter = Counter()
    seen_any = False
    for doc in corpus:
        seen_any = True
        counts.update(doc.lower().split())
    if not seen_any:
        raise ValueError("build_vocab: empty corpus")
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary.from_tokens(tok for tok, _ in ordered)


@dataclass(frozen=True)
class KnowledgeEntry:
    id: int
    subject: str
    relation: str
    object: str
    sentence: str
    token_ids: tuple

    @classmethod
    def build(cls, idx: int, subject: str, relation: str, obj: str,
              vocab: Vocabulary) -> "KnowledgeEntry":
        sentence = flatten_triplet(subject, relation, obj)
        return cls(id=idx, subject=subject, relation=relation, object=obj,
                   sentence=sentence,
                   token_ids=tuple(tokenize(sentence, vocab)))


class KnowledgeBase:
    """Ordered, immutable collection of entries; ids are dense 0..N-1."""

    def __init__(self, entries: list[KnowledgeEntry]):
        for i, e in enumerate(entries):
            if e.id != i:
                raise ValueError(f"entry at position {i} carries id {e.id}")
        self.entries = tuple(entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, idx: int) -> KnowledgeEntry:
        return self.entries[idx]

    def __iter__(self) -> Iterator[KnowledgeEntry]:
        return iter(self.entries)

    @classmethod
    def from_triplets(cls, triplets: Iterable[tuple], vocab: Vocabulary
                      ) -> "KnowledgeBase":
        entries = [
            KnowledgeEntry.build(i, s, r, o, vocab)
            for i, (s, r, o) in enumerate(triplets)
        ]
        return cls(entries)


def read_triplets(path) -> list[tuple]:
    """Parse a knowledge TSV into (subject, relation, object) tuples."""
    triplets: list[tuple] = []
    seen: set[tuple] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or any(not p.strip() for p in parts):
                raise ValueError(
                    f"{path}: malformed triplet on line {lineno}: {line!r}"
                )
            trip = tuple(parts)
            if trip in seen:
                warnings.warn(
                    f"{path}: duplicate triplet on line {lineno}: {line!r}",
                    stacklevel=2,
                )
            seen.add(trip)
            triplets.append(trip)
    return triplets


def save_triplets(triplets: Iterable[tuple], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s, r, o in triplets:
            fh.write(f"{s}\t{r}\t{o}\n")


def load_knowledge(path, vocab: Vocabulary) -> KnowledgeBase:
    """Read a TSV and produce the tokenized knowledge base."""
    return KnowledgeBase.from_triplets(read_triplets(path), vocab)


def knowledge_corpus(path) -> list[str]:
    """Flattened sentences straight off a TSV, for vocabulary building."""
    return [flatten_triplet(s, r, o) for s, r, o in read_triplets(Path(path))]
