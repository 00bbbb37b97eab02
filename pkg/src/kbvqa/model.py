"""Parameter container tying the reader encoder, the retriever's two
encoder sides, and the answer head together.

By default the query-side and knowledge-side encoders are separate
parameter sets that both start as copies of the reader's draw, the
dual-encoder convention of initializing every tower from one checkpoint;
that keeps any structure in the initial embedding space consistent across
towers while letting the answer loss and the retrieval loss shape their
own copies. A switch shares one parameter set across all three roles
instead. The answer head maps the pooled vector to answer logits, a
single linear layer unless a hidden width is configured.

When the answers are single vocabulary tokens, the plain head's columns
can start as copies of those tokens' embedding rows (the tied-embedding
trick). Under the bag encoder init the pooled vector is a mix of word
vectors, so a tied head reads an answer token out of the context before
any training; without it, a from-scratch reader has to discover copying
while the retriever loss erodes whatever lexical prior feeds it gold
entries. The copy happens at construction only; the head trains freely.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoder import (EncoderConfig, EncoderParameters, MultiModalInput,
                      build_input, encode, load_checkpoint, save_checkpoint,
                      _fill_from_arrays)

# Gain on the tied head columns. The loss gap an untrained copy circuit
# produces on a relevant entry must be large enough that tanh of it clears
# the entry's initial cosine similarity, or the pseudo-label regression
# pulls relevant entries down instead of up during the first epochs.
ANSWER_TIE_SCALE = 1.0


class RetrieverReader:
    def __init__(self, enc_config: EncoderConfig, num_answers: int,
                 share_encoders: bool = True, head_hidden: int = 0,
                 rng: np.random.Generator | None = None,
                 answer_token_ids=None):
        if num_answers < 2:
            raise ValueError("need at least two answers")
        self.enc_config = enc_config
        self.num_answers = num_answers
        self.share_encoders = bool(share_encoders)
        self.head_hidden = int(head_hidden)

        self.reader_params = EncoderParameters(enc_config, rng)
        if self.share_encoders:
            self.query_params = self.reader_params
            self.knowledge_params = self.reader_params
        else:
            self.query_params = EncoderParameters(enc_config, None)
            self.knowledge_params = EncoderParameters(enc_config, None)
            for side in (self.query_params, self.knowledge_params):
                for name, t in side.named().items():
                    t.data = self.reader_params[name].data.copy()

        d = enc_config.dim

        def w(*shape):
            if rng is None:
                return T.Tensor(np.zeros(shape), requires_grad=True)
            return T.Tensor(rng.normal(0.0, enc_config.init_std, size=shape),
                            requires_grad=True)

        self.head: dict[str, T.Tensor] = {}
        if self.head_hidden:
            self.head["w1"] = w(d, self.head_hidden)
            self.head["b1"] = T.Tensor(np.zeros(self.head_hidden),
                                       requires_grad=True)
            self.head["w2"] = w(self.head_hidden, num_answers)
            self.head["b2"] = T.Tensor(np.zeros(num_answers),
                                       requires_grad=True)
        else:
            self.head["w"] = w(d, num_answers)
            self.head["b"] = T.Tensor(np.zeros(num_answers),
                                      requires_grad=True)
        if answer_token_ids is not None and rng is not None \
                and not self.head_hidden:
            ids = list(answer_token_ids)
            if len(ids) != num_answers:
                raise ValueError(
                    f"{len(ids)} answer tokens for {num_answers} answers"
                )
            emb = self.reader_params["word_emb"].data
            for a, tok in enumerate(ids):
                if tok is not None:
                    self.head["w"].data[:, a] = ANSWER_TIE_SCALE * emb[int(tok)]

    def answer_logits(self, pooled: T.Tensor) -> T.Tensor:
        if self.head_hidden:
            hidden = T.tanh(T.linear(pooled, self.head["w1"], self.head["b1"]))
            return T.linear(hidden, self.head["w2"], self.head["b2"])
        return T.linear(pooled, self.head["w"], self.head["b"])

    def encode_reader(self, inp: MultiModalInput):
        return encode(inp, self.reader_params)

    def encode_query(self, inp: MultiModalInput):
        return encode(inp, self.query_params)

    def named_parameters(self) -> dict[str, T.Tensor]:
        out = {}
        for name, t in self.reader_params.named().items():
            out[f"reader.{name}"] = t
        if not self.share_encoders:
            for name, t in self.query_params.named().items():
                out[f"query.{name}"] = t
            for name, t in self.knowledge_params.named().items():
                out[f"knowledge.{name}"] = t
        for name, t in self.head.items():
            out[f"head.{name}"] = t
        return out

    def trainable(self) -> list[T.Tensor]:
        return list(self.named_parameters().values())

    @property
    def param_count(self) -> int:
        return sum(t.data.size for t in self.trainable())

    def save(self, path) -> None:
        header = {
            "encoder": self.enc_config.to_dict(),
            "num_answers": self.num_answers,
            "share_encoders": self.share_encoders,
            "head_hidden": self.head_hidden,
        }
        save_checkpoint(path, self.named_parameters(), header)

    @classmethod
    def load(cls, path) -> "RetrieverReader":
        header, arrays = load_checkpoint(path)
        model = cls(
            EncoderConfig.from_dict(header["encoder"]),
            num_answers=header["num_answers"],
            share_encoders=header["share_encoders"],
            head_hidden=header["head_hidden"],
            rng=None,
        )
        _fill_from_arrays(model.named_parameters(), arrays)
        return model


def qi_input(question_ids, patches) -> MultiModalInput:
    """Query-side input: question plus patches, knowledge span empty."""
    return build_input(question_ids=question_ids, patches=patches)


def qik_input(qi: MultiModalInput, entry_token_ids) -> MultiModalInput:
    """Splice entry tokens into the knowledge span of an existing input."""
    return build_input(
        question_ids=qi.question_ids,
        knowledge_ids=entry_token_ids,
        patches=qi.patch_values,
    )
