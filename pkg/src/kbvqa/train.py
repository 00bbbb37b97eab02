"""Training loop, optimizer, metric, and evaluation for the retriever-reader.

One optimizer step processes a batch of instances. For each instance the
stale index proposes top-t entries, the reader computes a with-knowledge
loss per entry weighted by the sigmoid of its loss gap, and the retriever
regresses the live cosine score of each proposed entry onto tanh(gap). The
knowledge-free forward runs once per instance and is reused for every
entry's gap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, encode_text_only
from .knowledge import Vocabulary, tokenize
from .model import RetrieverReader, qi_input
from .reader import (AnswerDistribution, LossBundle, combined_loss,
                     cross_entropy, predict, weighted_reader_loss)
from .retriever import (KnowledgeIndex, build_index, cosine_sim,
                        retrieve, retriever_loss, top_t)

SMOOTHING_MODES = ("smooth", "binary_retriever", "binary_reader",
                   "binary_both")


@dataclass
class TrainConfig:
    t: int = 3
    lam: float = 2.0            # serialized as "lambda"
    lr: float = 3e-4
    lr_decay: float = 0.75
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    smoothing_mode: str = "smooth"
    share_encoders: bool = False
    use_explicit_knowledge: bool = True
    index_refresh_steps: int = 1
    random_retrieval: bool = False
    # encoder shape
    dim: int = 32
    num_blocks: int = 2
    num_heads: int = 2
    mlp_ratio: int = 4
    max_seq_len: int = 64
    head_hidden: int = 0
    init_std: float = 0.2
    init_mode: str = "bag"

    def __post_init__(self):
        if not 1 <= self.t <= 5:
            raise ValueError(f"t must be in [1, 5], got {self.t}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.smoothing_mode not in SMOOTHING_MODES:
            raise ValueError(
                f"smoothing_mode must be one of {SMOOTHING_MODES}, "
                f"got {self.smoothing_mode!r}"
            )
        if self.index_refresh_steps < 1:
            raise ValueError("index_refresh_steps must be positive")
        if self.init_mode not in ("dense", "bag"):
            raise ValueError(
                f"init_mode must be 'dense' or 'bag', got {self.init_mode!r}"
            )

    @property
    def retriever_binary(self) -> bool:
        return self.smoothing_mode in ("binary_retriever", "binary_both")

    @property
    def reader_binary(self) -> bool:
        return self.smoothing_mode in ("binary_reader", "binary_both")

    def encoder_config(self, vocab_size: int, patch_grid: int,
                       patch_dim: int) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=vocab_size, dim=self.dim, num_blocks=self.num_blocks,
            num_heads=self.num_heads, mlp_ratio=self.mlp_ratio,
            max_seq_len=self.max_seq_len, patch_grid=patch_grid,
            patch_dim=patch_dim, init_std=self.init_std,
            init_mode=self.init_mode,
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for f in fields(self):
                key = "lambda" if f.name == "lam" else f.name
                fh.write(f"{key}={getattr(self, f.name)}\n")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        kwargs = {}
        with open(path, encoding="utf-8") as fh:
            raw = {}
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ValueError(
                        f"config line {lineno} is not key=value: {line!r}"
                    )
                key, value = line.split("=", 1)
                raw[key.strip()] = value.strip()
        by_name = {f.name: f for f in fields(cls)}
        for key, value in raw.items():
            name = "lam" if key == "lambda" else key
            if name not in by_name:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[name] = _coerce_field(by_name[name].type, value, key)
        return cls(**kwargs)


def _coerce_field(type_name, value: str, key: str):
    if type_name in ("int", int):
        return int(value)
    if type_name in ("float", float):
        return float(value)
    if type_name in ("bool", bool):
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {key!r}: bad boolean {value!r}")
    return value


def paper_preset(**overrides) -> TrainConfig:
    """Hyperparameters as documented for the full-scale setting."""
    base = dict(lr=1e-5, lr_decay=0.75, weight_decay=1e-4, batch_size=32,
                epochs=30)
    base.update(overrides)
    return TrainConfig(**base)


def desk_preset(**overrides) -> TrainConfig:
    """Defaults sized for the synthetic task from random initialization."""
    base = dict(lr=3e-4, lr_decay=0.75, weight_decay=1e-4, batch_size=16,
                epochs=10)
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# metric

def vqa_accuracy(prediction: str, human_answers) -> float:
    """min(1, matching annotators / 3), the standard soft accuracy."""
    matches = sum(1 for a in human_answers if a == prediction)
    return min(1.0, matches / 3.0)


def make_annotators(label: str, agree: int = 10, total: int = 10,
                    filler: str = "<disagree>") -> list:
    """Annotator multiset with a controlled agreement count."""
    if not 0 <= agree <= total:
        raise ValueError("agree must be within [0, total]")
    return [label] * agree + [filler] * (total - agree)


# ---------------------------------------------------------------------------
# optimizer

class AdamW:
    """Adaptive moments with decoupled weight decay.

    Parameters update in list order, so the walk is deterministic for a
    fixed model construction order.
    """

    def __init__(self, params: list, lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
            m_hat = self._m[i] / bc1
            v_hat = self._v[i] / bc2
            p.data -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                 + self.weight_decay * p.data)


# ---------------------------------------------------------------------------
# logging

@dataclass
class MetricsLog:
    step_rows: list = field(default_factory=list)
    epoch_rows: list = field(default_factory=list)

    HEADER = ("kind,step,epoch,lr,reader_loss,retriever_loss,total_loss,"
              "val_accuracy,recall_at_1,recall_at_t,frac_delta_neg")

    def log_step(self, step, reader_loss, retriever_loss, total_loss):
        self.step_rows.append((step, reader_loss, retriever_loss, total_loss))

    def log_epoch(self, epoch, lr, val_accuracy, recall_at_1, recall_at_t,
                  frac_delta_neg):
        self.epoch_rows.append((epoch, lr, val_accuracy, recall_at_1,
                                recall_at_t, frac_delta_neg))

    @staticmethod
    def _fmt(x) -> str:
        if x is None:
            return ""
        return repr(float(x))

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.HEADER + "\n")
            for step, rl, tl, total in self.step_rows:
                fh.write(f"step,{step},,,{self._fmt(rl)},{self._fmt(tl)},"
                         f"{self._fmt(total)},,,,\n")
            for epoch, lr, acc, r1, rt, fneg in self.epoch_rows:
                fh.write(f"epoch,,{epoch},{self._fmt(lr)},,,,"
                         f"{self._fmt(acc)},{self._fmt(r1)},{self._fmt(rt)},"
                         f"{self._fmt(fneg)}\n")


class TrainAbort(RuntimeError):
    """Raised when a loss turns non-finite; carries the offending bundle."""

    def __init__(self, message: str, bundle: LossBundle):
        super().__init__(message)
        self.bundle = bundle


# ---------------------------------------------------------------------------
# training

def _prepare(split, vocab: Vocabulary):
    return [(tuple(tokenize(q.question, vocab)), q.image, q.answer_index)
            for q in split]


def _instance_losses(model, qi, label, entries, config, q_emb=None):
    """Reader and retriever loss pieces for one instance.

    q_emb is the in-graph query embedding when live retrieval is on; with
    shared encoders it doubles as the knowledge-free forward, so that
    forward is computed once and reused for every entry's gap. Returns
    (weighted per-entry reader losses, per-entry retriever losses, deltas,
    l_qik floats, l_qi).
    """
    with T.no_grad():
        if q_emb is not None and model.share_encoders:
            dist = AnswerDistribution(
                model.answer_logits(T.Tensor(q_emb.data)))
        else:
            dist = predict(qi, None, model)
        l_qi = float(cross_entropy(dist, label).data)

    weighted, deltas, l_qiks = [], [], []
    for entry in entries:
        l_qik = cross_entropy(predict(qi, entry, model), label)
        delta = l_qi - float(l_qik.data)
        deltas.append(delta)
        l_qiks.append(float(l_qik.data))
        weighted.append(weighted_reader_loss(delta, l_qik,
                                             binary=config.reader_binary))

    ret_losses = []
    if q_emb is not None:
        for entry, delta in zip(entries, deltas):
            k_emb = encode_text_only(entry.token_ids, model.knowledge_params)
            score = cosine_sim(q_emb, k_emb)
            ret_losses.append(
                retriever_loss(delta, [score], binary=config.retriever_binary)
            )
    return weighted, ret_losses, deltas, l_qiks, l_qi


def _bundle(deltas, l_qiks, l_qi, l_ret, total) -> LossBundle:
    return LossBundle(
        l_qik=tuple(l_qiks),
        delta=tuple(deltas),
        sigma_delta=tuple(float(T.sigmoid_kernel(np.asarray(d)))
                          for d in deltas),
        tanh_delta=tuple(math.tanh(d) for d in deltas),
        l_qi=l_qi,
        l_ret=l_ret,
        total=total,
    )


def train(config: TrainConfig, data, run_dir=None, eval_every_epoch=True,
          verbose=False):
    """Run the full loop; returns (model, MetricsLog).

    data carries train/val splits, the knowledge base, answer space, and
    vocabulary (the generator's bundle or an equivalent object).
    """
    rng = np.random.default_rng(config.seed)
    grid = data.train[0].image.shape[0]
    patch_dim = data.train[0].image.shape[-1]
    enc_config = config.encoder_config(len(data.vocab.id_to_token), grid,
                                       patch_dim)
    answer_tokens = None
    if config.init_mode == "bag":
        answer_tokens = [data.vocab.token_to_id.get(a)
                         for a in data.answers.answers]
    model = RetrieverReader(enc_config, num_answers=len(data.answers),
                            share_encoders=config.share_encoders,
                            head_hidden=config.head_hidden, rng=rng,
                            answer_token_ids=answer_tokens)
    log = MetricsLog()
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        config.save(run_dir / "config.txt")

    if config.epochs == 0:
        if run_dir is not None:
            log.write_csv(run_dir / "metrics.csv")
            model.save(run_dir / "model.npz")
        return model, log

    opt = AdamW(model.trainable(), lr=config.lr,
                weight_decay=config.weight_decay)
    train_set = _prepare(data.train, data.vocab)
    needs_index = config.use_explicit_knowledge and not config.random_retrieval
    index = None
    step = 0

    for epoch in range(config.epochs):
        opt.lr = config.lr * config.lr_decay ** epoch
        epoch_deltas_neg = 0
        epoch_deltas = 0

        order = rng.permutation(len(train_set))
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            if needs_index and step % config.index_refresh_steps == 0:
                version = index.version + 1 if index is not None else 0
                index = build_index(data.kb, model.knowledge_params, version)
            try:
                opt.zero_grad()

                batch_weighted, batch_ret = [], []
                for i in batch:
                    token_ids, image, label = train_set[i]
                    qi = qi_input(token_ids, image)

                    if not config.use_explicit_knowledge:
                        loss = cross_entropy(predict(qi, None, model), label)
                        if not np.isfinite(loss.data):
                            raise TrainAbort(
                                f"non-finite loss at step {step}",
                                _bundle([], [], float(loss.data), None,
                                        float(loss.data)),
                            )
                        batch_weighted.append(loss)
                        continue

                    if config.random_retrieval:
                        ids = rng.choice(len(data.kb), size=config.t,
                                         replace=False)
                        entries = [data.kb[int(j)] for j in ids]
                        q_emb = None
                    else:
                        q_emb, _ = model.encode_query(qi)
                        result = top_t(index, q_emb.data, config.t)
                        entries = [data.kb[j] for j in result.entry_ids]

                    weighted, ret_losses, deltas, l_qiks, l_qi = \
                        _instance_losses(model, qi, label, entries, config,
                                         q_emb)
                    if not all(np.isfinite(float(w.data)) for w in weighted):
                        raise TrainAbort(
                            f"non-finite reader loss at step {step}",
                            _bundle(deltas, l_qiks, l_qi, None, math.nan),
                        )
                    batch_weighted.extend(weighted)
                    batch_ret.extend(ret_losses)
                    epoch_deltas += len(deltas)
                    epoch_deltas_neg += sum(1 for d in deltas if d < 0)

                l_ret = (T.mean(T.stack_scalars(batch_ret))
                         if batch_ret else None)
                total = combined_loss(batch_weighted, l_ret, config.lam)
                if not np.isfinite(total.data):
                    raise TrainAbort(
                        f"non-finite total loss at step {step}",
                        _bundle([], [], math.nan,
                                float(l_ret.data) if l_ret is not None else None,
                                float(total.data)),
                    )

                T.backward(total)
                opt.step()

                reader_val = float(np.mean([float(w.data)
                                            for w in batch_weighted]))
                log.log_step(step, reader_val,
                             float(l_ret.data) if l_ret is not None else None,
                             float(total.data))
                step += 1
            except FloatingPointError as exc:
                raise TrainAbort(
                    f"non-finite value in step {step}: {exc}",
                    _bundle([], [], math.nan, None, math.nan),
                ) from exc

        frac_neg = (epoch_deltas_neg / epoch_deltas if epoch_deltas
                    else None)
        if eval_every_epoch:
            eval_index = (build_index(data.kb, model.knowledge_params)
                          if config.use_explicit_knowledge
                          and not config.random_retrieval else None)
            report = evaluate(model, data.val, data, config.t,
                              index=eval_index,
                              use_knowledge=config.use_explicit_knowledge,
                              random_retrieval=config.random_retrieval,
                              seed=config.seed)
            log.log_epoch(epoch, opt.lr, report.accuracy, report.recall_at_1,
                          report.recall_at_t, frac_neg)
            if verbose:
                r1 = ("-" if report.recall_at_1 is None
                      else f"{report.recall_at_1:.3f}")
                rt = ("-" if report.recall_at_t is None
                      else f"{report.recall_at_t:.3f}")
                fn = "-" if frac_neg is None else f"{frac_neg:.3f}"
                print(f"epoch {epoch}: lr {opt.lr:.3g} "
                      f"acc {report.accuracy:.3f} r@1 {r1} r@t {rt} "
                      f"dneg {fn}", flush=True)
        else:
            log.log_epoch(epoch, opt.lr, None, None, None, frac_neg)
            if verbose:
                print(f"epoch {epoch}: lr {opt.lr:.3g}", flush=True)
        if run_dir is not None:
            model.save(run_dir / f"checkpoint_epoch{epoch}.npz")

    if run_dir is not None:
        log.write_csv(run_dir / "metrics.csv")
        model.save(run_dir / "model.npz")
    return model, log


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    accuracy: float
    recall_at_1: float | None
    recall_at_t: float | None
    rows: list               # (qid, prediction, top1 id, delta, sigma(delta))


def evaluate(model: RetrieverReader, split, data, t: int,
             index: KnowledgeIndex | None = None, use_knowledge: bool = True,
             random_retrieval: bool = False, seed: int = 0) -> EvalReport:
    """Score a split; pure given (model, split, flags, seed)."""
    if use_knowledge and not random_retrieval and index is None:
        raise ValueError("evaluate needs an index when retrieval is live")
    rng = np.random.default_rng(seed + 1)
    acc_sum = 0.0
    r1_hits = rt_hits = n_knowledge = 0
    rows = []

    for inst in split:
        token_ids = tuple(tokenize(inst.question, data.vocab))
        qi = qi_input(token_ids, inst.image)
        with T.no_grad():
            if not use_knowledge:
                entry = None
                top_ids = ()
            elif random_retrieval:
                top_ids = tuple(int(j) for j in
                                rng.choice(len(data.kb), size=t,
                                           replace=False))
                entry = data.kb[top_ids[0]]
            else:
                result = retrieve(qi, index, t, model.query_params)
                top_ids = result.entry_ids
                entry = data.kb[top_ids[0]]
            dist = predict(qi, entry, model)
            pred_idx = dist.argmax_index()
            if entry is not None:
                l_qik = float(cross_entropy(dist, inst.answer_index).data)
                l_qi = float(cross_entropy(
                    predict(qi, None, model), inst.answer_index).data)
                delta = l_qi - l_qik
                sigma = float(T.sigmoid_kernel(np.asarray(delta)))
            else:
                delta = sigma = None

        prediction = data.answers[pred_idx]
        acc_sum += vqa_accuracy(prediction, make_annotators(inst.answer))
        if inst.needs_knowledge and use_knowledge:
            n_knowledge += 1
            if top_ids and top_ids[0] == inst.gold_entry_id:
                r1_hits += 1
            if inst.gold_entry_id in top_ids:
                rt_hits += 1
        rows.append((inst.qid, prediction,
                     top_ids[0] if top_ids else None, delta, sigma))

    recall_1 = r1_hits / n_knowledge if n_knowledge else None
    recall_t = rt_hits / n_knowledge if n_knowledge else None
    return EvalReport(accuracy=acc_sum / len(split), recall_at_1=recall_1,
                      recall_at_t=recall_t, rows=rows)


def write_predictions(path, rows) -> None:
    """Per-question dump: id, predicted answer, top entry, gap, weight."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("question_id,prediction,top_entry_id,delta,sigma_delta\n")
        for qid, pred, top1, delta, sigma in rows:
            top_s = "" if top1 is None else str(top1)
            d_s = "" if delta is None else f"{delta:.10f}"
            s_s = "" if sigma is None else f"{sigma:.10f}"
            fh.write(f"{qid},{pred},{top_s},{d_s},{s_s}\n")
