"""Ablation table, hyperparameter sweeps, and attention export.

Each runner trains fresh models under a shared seed so rows differ only in
the configuration knob under study, then writes a CSV next to a rendered
figure.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np

from . import plots
from . import tensor as T
from .knowledge import tokenize
from .model import qi_input, qik_input
from .reader import AnswerDistribution
from .retriever import build_index, retrieve
from .train import TrainConfig, evaluate, train

ABLATION_ROWS = (
    ("smooth", dict(smoothing_mode="smooth")),
    ("binary_both", dict(smoothing_mode="binary_both")),
    ("binary_retriever", dict(smoothing_mode="binary_retriever")),
    ("binary_reader", dict(smoothing_mode="binary_reader")),
    ("lambda_zero", dict(lam=0.0)),
    ("no_knowledge", dict(use_explicit_knowledge=False)),
    ("random_retrieval", dict(random_retrieval=True)),
)


def _final_eval(config: TrainConfig, model, data):
    index = None
    if config.use_explicit_knowledge and not config.random_retrieval:
        index = build_index(data.kb, model.knowledge_params)
    return evaluate(model, data.val, data, config.t, index=index,
                    use_knowledge=config.use_explicit_knowledge,
                    random_retrieval=config.random_retrieval,
                    seed=config.seed)


def ablate(base_config: TrainConfig, data, out_dir=None, verbose=False):
    """Train every ablation row under the base seed; returns result rows."""
    rows = []
    for name, over in ABLATION_ROWS:
        config = replace(base_config, **over)
        if verbose:
            print(f"[ablate] {name}", flush=True)
        model, _ = train(config, data, eval_every_epoch=False)
        report = _final_eval(config, model, data)
        rows.append((name, report.accuracy, report.recall_at_1,
                     report.recall_at_t))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "ablation.csv", "w", encoding="utf-8",
                  newline="\n") as fh:
            fh.write("name,accuracy,recall_at_1,recall_at_t\n")
            for name, acc, r1, rt in rows:
                r1s = "" if r1 is None else f"{r1:.6f}"
                rts = "" if rt is None else f"{rt:.6f}"
                fh.write(f"{name},{acc:.6f},{r1s},{rts}\n")
        plots.ablation_bars([r[0] for r in rows], [r[1] for r in rows],
                            out_dir / "ablation.png")
    return rows


SWEEP_VALUES = {
    "t": tuple(range(1, 6)),
    "lambda": tuple(float(v) for v in range(0, 11)),
}


def sweep(param: str, base_config: TrainConfig, data, out_dir=None,
          verbose=False):
    """One training run per value of t or lambda, shared seed."""
    if param not in SWEEP_VALUES:
        raise ValueError(f"sweep param must be 't' or 'lambda', got {param!r}")
    rows = []
    for value in SWEEP_VALUES[param]:
        over = {"t": int(value)} if param == "t" else {"lam": value}
        config = replace(base_config, **over)
        if verbose:
            print(f"[sweep] {param}={value}", flush=True)
        model, _ = train(config, data, eval_every_epoch=False)
        report = _final_eval(config, model, data)
        rows.append((value, report.accuracy, report.recall_at_1))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / f"sweep_{param}.csv", "w", encoding="utf-8",
                  newline="\n") as fh:
            fh.write(f"{param},accuracy,recall_at_1\n")
            for value, acc, r1 in rows:
                r1s = "" if r1 is None else f"{r1:.6f}"
                fh.write(f"{value},{acc:.6f},{r1s}\n")
        plots.sweep_plot([r[0] for r in rows], [r[1] for r in rows],
                         [r[2] for r in rows], param,
                         out_dir / f"sweep_{param}.png")
    return rows


def export_attention(model, data, question_ids, out_dir, t: int = 1):
    """Dump last-block CLS attention over the patch grid for val questions.

    Per question: a CSV of head,row,col,value (g*g values per head), a
    heat-map image, and a sidecar listing the retrieved entries and the
    predicted answer.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = build_index(data.kb, model.knowledge_params)
    grid = data.val[0].image.shape[0]
    written = []
    for qid in question_ids:
        if not 0 <= qid < len(data.val):
            raise IndexError(
                f"question id {qid} outside the validation split"
            )
        inst = data.val[qid]
        qi = qi_input(tuple(tokenize(inst.question, data.vocab)), inst.image)
        with T.no_grad():
            result = retrieve(qi, index, t, model.query_params)
            entry = data.kb[result.entry_ids[0]]
            inp = qik_input(qi, entry.token_ids)
            pooled, attn_maps = model.encode_reader(inp)
            dist = AnswerDistribution(model.answer_logits(pooled))
        prediction = data.answers[dist.argmax_index()]

        last = attn_maps[-1]                       # (heads, s, s)
        cls_row = last[:, 0, :]                    # attention paid by CLS
        patch_part = cls_row[:, -grid * grid:]     # patches sit at the tail
        grids = patch_part.reshape(-1, grid, grid)

        csv_path = out_dir / f"attn_q{qid}.csv"
        with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("head,row,col,value\n")
            for h in range(grids.shape[0]):
                for r in range(grid):
                    for c in range(grid):
                        fh.write(f"{h},{r},{c},{grids[h, r, c]:.12f}\n")
        plots.attention_heatmaps(
            grids, out_dir / f"attn_q{qid}.png",
            title=f"q{qid}: {inst.question!r} -> {prediction}",
        )
        with open(out_dir / f"attn_q{qid}_meta.txt", "w", encoding="utf-8",
                  newline="\n") as fh:
            fh.write(f"question: {inst.question}\n")
            fh.write(f"prediction: {prediction}\n")
            fh.write(f"label: {inst.answer}\n")
            for rank, (eid, score) in enumerate(
                    zip(result.entry_ids, result.scores)):
                fh.write(f"retrieved[{rank}]: id={eid} score={score:.6f} "
                         f"{data.kb[eid].sentence}\n")
        written.append(csv_path)
    return written
