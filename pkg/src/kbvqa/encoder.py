"""Single-stream multi-modal transformer encoder.

Text tokens and image patches share one sequence: summed word/patch,
position, and segment embeddings run through pre-norm attention blocks, and
the CLS row is pooled into a fixed-width vector. The same stack encodes
knowledge sentences alone (text-only path) for indexing, plus a batched
no-graph twin of that path so rebuilding a few hundred entry vectors does
not crawl through per-entry graphs.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from . import tensor as T
from .knowledge import CLS_ID, SEP_ID


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    dim: int = 32
    num_blocks: int = 2
    num_heads: int = 2
    mlp_ratio: int = 4
    max_seq_len: int = 64
    num_segments: int = 2
    patch_grid: int = 4
    patch_dim: int = 8
    activation: str = "gelu"
    pooler: str = "tanh"
    ln_eps: float = 1e-12
    init_std: float = 0.2
    init_mode: str = "dense"

    def __post_init__(self):
        if self.dim % self.num_heads != 0:
            raise ValueError(
                f"dim {self.dim} not divisible by {self.num_heads} heads"
            )
        for name in ("vocab_size", "dim", "num_blocks", "num_heads",
                     "mlp_ratio", "max_seq_len", "num_segments",
                     "patch_grid", "patch_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.pooler not in ("tanh", "identity"):
            raise ValueError(f"unknown pooler {self.pooler!r}")
        if self.init_mode not in ("dense", "bag"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")

    @property
    def num_patches(self) -> int:
        return self.patch_grid * self.patch_grid

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass
class MultiModalInput:
    token_ids: np.ndarray      # (n_text,) int64, [CLS] k* [SEP] q* [SEP]
    patch_values: np.ndarray   # (m, patch_dim) float64, possibly m=0
    position_ids: np.ndarray   # (n_text+m,) int64, 0..n_text+m-1
    segment_ids: np.ndarray    # (n_text+m,) int64, 0 text / 1 patch
    knowledge_mask: np.ndarray  # (n_text+m,) bool, True on knowledge tokens
    question_ids: tuple = ()   # original spans kept for re-splicing
    knowledge_ids: tuple = ()

    @property
    def seq_len(self) -> int:
        return len(self.position_ids)

    @property
    def has_knowledge(self) -> bool:
        return bool(self.knowledge_mask.any())


def build_input(question_ids: Sequence[int] = (),
                knowledge_ids: Sequence[int] = (),
                patches: np.ndarray | None = None) -> MultiModalInput:
    """Assemble the fused sequence.

    Layout is [CLS], then the knowledge span + SEP when present, then the
    question span + SEP when present, then patches. Position ids run
    sequentially over the whole thing; patches sit in segment 1.
    """
    question_ids = tuple(int(t) for t in question_ids)
    knowledge_ids = tuple(int(t) for t in knowledge_ids)
    toks: list[int] = [CLS_ID]
    kmask: list[bool] = [False]
    if knowledge_ids:
        toks.extend(knowledge_ids)
        kmask.extend([True] * len(knowledge_ids))
        toks.append(SEP_ID)
        kmask.append(False)
    if question_ids:
        toks.extend(question_ids)
        toks.append(SEP_ID)
        kmask.extend([False] * (len(question_ids) + 1))
    if patches is None:
        pv = np.zeros((0, 0), dtype=np.float64)
    else:
        pv = np.asarray(patches, dtype=np.float64)
        if pv.ndim == 3:  # (g, g, p) grid
            pv = pv.reshape(-1, pv.shape[-1])
        if pv.ndim != 2:
            raise ValueError(f"patches must be (m, p) or (g, g, p), got {pv.shape}")
    n_text = len(toks)
    m = pv.shape[0]
    total = n_text + m
    return MultiModalInput(
        token_ids=np.asarray(toks, dtype=np.int64),
        patch_values=pv,
        position_ids=np.arange(total, dtype=np.int64),
        segment_ids=np.concatenate(
            [np.zeros(n_text, dtype=np.int64), np.ones(m, dtype=np.int64)]
        ),
        knowledge_mask=np.asarray(kmask + [False] * m, dtype=bool),
        question_ids=question_ids,
        knowledge_ids=knowledge_ids,
    )


_BLOCK_FIELDS = (
    "ln1_gain", "ln1_bias",
    "attn_wq", "attn_bq", "attn_wk", "attn_bk", "attn_wv", "attn_bv",
    "attn_wo", "attn_bo",
    "ln2_gain", "ln2_bias",
    "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
)


class EncoderParameters:
    """Flat named map of tensors plus per-block views for the hot loop."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator | None):
        self.config = config
        d = config.dim
        hidden = config.mlp_ratio * d
        bag = config.init_mode == "bag" and rng is not None

        def w(*shape, scale=1.0):
            if rng is None:
                return T.Tensor(np.zeros(shape), requires_grad=True)
            return T.Tensor(
                rng.normal(0.0, scale * config.init_std, size=shape),
                requires_grad=True)

        def zeros(*shape):
            return T.Tensor(np.zeros(shape), requires_grad=True)

        def ones(*shape):
            return T.Tensor(np.ones(shape), requires_grad=True)

        def eye(n, scale=1.0):
            return T.Tensor(scale * np.eye(n), requires_grad=True)

        def structural(*shape):
            return zeros(*shape) if bag else w(*shape)

        # Bag mode initializes the stack as a transparent bag-of-words pipe:
        # zero queries and keys make attention exactly uniform, identity
        # value and output projections average the layer-normed word vectors
        # into CLS unchanged, the MLP branch is dead (gelu's positive mean
        # would otherwise push one shared direction into every sequence and
        # swamp lexical geometry), and the pooler is the identity around a
        # tanh kept linear by the 0.1 output scale. Untrained, two sequences
        # are then cosine-similar exactly when they share tokens, which
        # hands the retriever a lexical-overlap prior; position, segment,
        # patch, and mixing structure all grow back from gradients (zeroed
        # projections still receive them: mlp_w2 directly, wq/wk through the
        # softmax jacobian at uniform weights).
        p: dict[str, T.Tensor] = {}
        p["word_emb"] = w(config.vocab_size, d)
        if bag:
            p["word_emb"].data[CLS_ID] = 0.0
            p["word_emb"].data[SEP_ID] = 0.0
        p["patch_proj_w"] = structural(config.patch_dim, d)
        p["patch_proj_b"] = zeros(d)
        p["pos_emb"] = structural(config.max_seq_len, d)
        p["seg_emb"] = structural(config.num_segments, d)
        for i in range(config.num_blocks):
            p[f"blocks.{i}.ln1_gain"] = ones(d)
            p[f"blocks.{i}.ln1_bias"] = zeros(d)
            p[f"blocks.{i}.attn_wq"] = structural(d, d)
            p[f"blocks.{i}.attn_bq"] = zeros(d)
            p[f"blocks.{i}.attn_wk"] = structural(d, d)
            p[f"blocks.{i}.attn_bk"] = zeros(d)
            p[f"blocks.{i}.attn_wv"] = eye(d) if bag else w(d, d)
            p[f"blocks.{i}.attn_bv"] = zeros(d)
            p[f"blocks.{i}.attn_wo"] = eye(d, 0.1) if bag else w(d, d)
            p[f"blocks.{i}.attn_bo"] = zeros(d)
            p[f"blocks.{i}.ln2_gain"] = ones(d)
            p[f"blocks.{i}.ln2_bias"] = zeros(d)
            p[f"blocks.{i}.mlp_w1"] = w(d, hidden)
            p[f"blocks.{i}.mlp_b1"] = zeros(hidden)
            p[f"blocks.{i}.mlp_w2"] = (zeros(hidden, d) if bag
                                       else w(hidden, d))
            p[f"blocks.{i}.mlp_b2"] = zeros(d)
        if config.pooler == "tanh":
            p["pool_w1"] = eye(d) if bag else w(d, d)
            p["pool_b1"] = zeros(d)
            p["pool_w2"] = eye(d) if bag else w(d, d)
            p["pool_b2"] = zeros(d)
        self._params = p
        self.blocks = [
            {f: p[f"blocks.{i}.{f}"] for f in _BLOCK_FIELDS}
            for i in range(config.num_blocks)
        ]

    def named(self) -> dict[str, T.Tensor]:
        return dict(self._params)

    def __getitem__(self, name: str) -> T.Tensor:
        return self._params[name]

    def tensors(self) -> list[T.Tensor]:
        return list(self._params.values())

    @property
    def param_count(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def save(self, path) -> None:
        save_checkpoint(path, self.named(), {"encoder": self.config.to_dict()})

    @classmethod
    def load(cls, path) -> "EncoderParameters":
        header, arrays = load_checkpoint(path)
        config = EncoderConfig.from_dict(header["encoder"])
        params = cls(config, rng=None)
        params.load_arrays(arrays)
        return params

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        _fill_from_arrays(self._params, arrays)


def _fill_from_arrays(params: dict[str, T.Tensor],
                      arrays: dict[str, np.ndarray]) -> None:
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise ValueError(
            f"checkpoint mismatch: missing {sorted(missing)}, "
            f"unexpected {sorted(extra)}"
        )
    for name, tensor in params.items():
        arr = arrays[name]
        if arr.shape != tensor.data.shape:
            raise ValueError(
                f"checkpoint shape mismatch for {name}: "
                f"stored {arr.shape}, expected {tensor.data.shape}"
            )
        tensor.data = np.ascontiguousarray(arr, dtype=np.float64)


def save_checkpoint(path, named: dict[str, T.Tensor], header: dict) -> None:
    """Flat named arrays with a JSON header, written as an npz archive."""
    arrays = {"__header__": np.array(json.dumps(header, sort_keys=True))}
    for name, tensor in named.items():
        arrays[name] = tensor.data
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as npz:
        header = json.loads(str(npz["__header__"]))
        arrays = {k: npz[k] for k in npz.files if k != "__header__"}
    return header, arrays


# ---------------------------------------------------------------------------
# forward passes

def embed(inp: MultiModalInput, params: EncoderParameters) -> T.Tensor:
    """Sum of token/patch, position, and segment embeddings, one row each."""
    cfg = params.config
    ids = inp.token_ids
    if ids.size and int(ids.max()) >= cfg.vocab_size:
        raise ValueError(
            f"token id {int(ids.max())} out of range for vocab of {cfg.vocab_size}"
        )
    if inp.seq_len > cfg.max_seq_len:
        raise ValueError(
            f"sequence of {inp.seq_len} exceeds max_seq_len {cfg.max_seq_len}"
        )
    m = inp.patch_values.shape[0]
    if m:
        if inp.patch_values.shape[1] != cfg.patch_dim:
            raise ValueError(
                f"patch width {inp.patch_values.shape[1]} != {cfg.patch_dim}"
            )
        tok = T.gather_rows(params["word_emb"], ids)
        pat = T.linear(T.Tensor(inp.patch_values),
                       params["patch_proj_w"], params["patch_proj_b"])
        base = T.concat_rows([tok, pat])
    else:
        base = T.gather_rows(params["word_emb"], ids)
    pos = T.gather_rows(params["pos_emb"], inp.position_ids)
    seg = T.gather_rows(params["seg_emb"], inp.segment_ids)
    return T.add(T.add(base, pos), seg)


def encode_block(e: T.Tensor, block: dict, cfg: EncoderConfig):
    """One pre-norm unit: attention then MLP, each inside a residual."""
    h = T.layer_norm(e, block["ln1_gain"], block["ln1_bias"], eps=cfg.ln_eps)
    q = T.linear(h, block["attn_wq"], block["attn_bq"])
    k = T.linear(h, block["attn_wk"], block["attn_bk"])
    v = T.linear(h, block["attn_wv"], block["attn_bv"])
    mixed, weights = T.attention(q, k, v, cfg.num_heads)
    e = T.add(T.linear(mixed, block["attn_wo"], block["attn_bo"]), e)
    h2 = T.layer_norm(e, block["ln2_gain"], block["ln2_bias"], eps=cfg.ln_eps)
    act = T.gelu if cfg.activation == "gelu" else T.relu
    inner = act(T.linear(h2, block["mlp_w1"], block["mlp_b1"]))
    e = T.add(T.linear(inner, block["mlp_w2"], block["mlp_b2"]), e)
    return e, weights


def _pool(cls_row: T.Tensor, params: EncoderParameters) -> T.Tensor:
    if params.config.pooler == "identity":
        return cls_row
    hidden = T.tanh(T.linear(cls_row, params["pool_w1"], params["pool_b1"]))
    return T.linear(hidden, params["pool_w2"], params["pool_b2"])


def encode(inp: MultiModalInput, params: EncoderParameters):
    """Full stack; returns the pooled CLS vector and per-block attention."""
    e = embed(inp, params)
    attn_maps = []
    for block in params.blocks:
        e, weights = encode_block(e, block, params.config)
        attn_maps.append(weights)
    pooled = _pool(T.row(e, 0), params)
    return pooled, attn_maps


def encode_text_only(token_ids: Sequence[int],
                     params: EncoderParameters) -> T.Tensor:
    """Encode a bare token sequence (knowledge side, no patches)."""
    token_ids = tuple(int(t) for t in token_ids)
    if not token_ids:
        raise ValueError("encode_text_only: empty token sequence")
    pooled, _ = encode(build_input(knowledge_ids=token_ids), params)
    return pooled


def encode_text_batch(token_seqs: Sequence[Sequence[int]],
                      params: EncoderParameters) -> np.ndarray:
    """No-graph twin of encode_text_only over many sequences at once.

    Sequences are grouped by length so each group runs as one (B, s, d)
    pass through the same kernels the graph ops use. Returns an (N, d)
    array in input order.
    """
    cfg = params.config
    n = len(token_seqs)
    out = np.empty((n, cfg.dim))
    by_len: dict[int, list[int]] = {}
    for i, seq in enumerate(token_seqs):
        if len(seq) == 0:
            raise ValueError(f"encode_text_batch: empty sequence at {i}")
        by_len.setdefault(len(seq), []).append(i)

    word = params["word_emb"].data
    pos = params["pos_emb"].data
    seg0 = params["seg_emb"].data[0]
    for length, idxs in by_len.items():
        s = length + 2
        if s > cfg.max_seq_len:
            raise ValueError(
                f"sequence of {s} exceeds max_seq_len {cfg.max_seq_len}"
            )
        ids = np.empty((len(idxs), s), dtype=np.int64)
        for r, i in enumerate(idxs):
            ids[r, 0] = CLS_ID
            ids[r, 1:length + 1] = token_seqs[i]
            ids[r, length + 1] = SEP_ID
        e = word[ids] + pos[:s] + seg0
        for block in params.blocks:
            h = T.layer_norm_kernel(
                e, block["ln1_gain"].data, block["ln1_bias"].data, cfg.ln_eps
            )
            q = h @ block["attn_wq"].data + block["attn_bq"].data
            k = h @ block["attn_wk"].data + block["attn_bk"].data
            v = h @ block["attn_wv"].data + block["attn_bv"].data
            mixed = T.attention_kernel(q, k, v, cfg.num_heads)
            e = (mixed @ block["attn_wo"].data + block["attn_bo"].data) + e
            h2 = T.layer_norm_kernel(
                e, block["ln2_gain"].data, block["ln2_bias"].data, cfg.ln_eps
            )
            inner = h2 @ block["mlp_w1"].data + block["mlp_b1"].data
            if cfg.activation == "gelu":
                inner = T.gelu_kernel(inner)
            else:
                inner = np.maximum(inner, 0.0)
            e = (inner @ block["mlp_w2"].data + block["mlp_b2"].data) + e
        cls = e[:, 0]
        if cfg.pooler == "tanh":
            hidden = np.tanh(cls @ params["pool_w1"].data + params["pool_b1"].data)
            pooled = hidden @ params["pool_w2"].data + params["pool_b2"].data
        else:
            pooled = cls
        out[idxs] = pooled
    return out
