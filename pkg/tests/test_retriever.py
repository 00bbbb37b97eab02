"""Cosine ranking, index construction, and the pseudo-label regression."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kbvqa import tensor as T
from kbvqa import encoder as E
from kbvqa import knowledge as K
from kbvqa import retriever as R
from gradcheck import assert_grads_close

RNG = np.random.default_rng(99)


def tiny_setup(n_entries=6, seed=0):
    trips = [(f"animal{i}", "eats", f"food{i}") for i in range(n_entries)]
    corpus = [K.flatten_triplet(*t) for t in trips]
    vocab = K.build_vocab(corpus)
    kb = K.KnowledgeBase.from_triplets(trips, vocab)
    cfg = E.EncoderConfig(vocab_size=len(vocab), dim=8, num_blocks=1,
                          num_heads=2, mlp_ratio=2, max_seq_len=16,
                          patch_grid=2, patch_dim=3)
    params = E.EncoderParameters(cfg, np.random.default_rng(seed))
    return kb, params, vocab, cfg


class TestCosine:
    def test_identical_vectors(self):
        v = T.Tensor(RNG.normal(size=5))
        assert R.cosine_sim(v, T.Tensor(v.data.copy())).item() == 1.0

    def test_orthogonal(self):
        a = T.Tensor([1.0, 0.0])
        b = T.Tensor([0.0, 1.0])
        assert R.cosine_sim(a, b).item() == 0.0

    def test_analytic_value(self):
        a = T.Tensor([1.0, 1.0])
        b = T.Tensor([1.0, 0.0])
        assert abs(R.cosine_sim(a, b).item() - 1 / math.sqrt(2)) < 1e-12

    def test_zero_norm_rejected(self):
        with pytest.raises(FloatingPointError, match="zero-norm"):
            R.cosine_sim(T.Tensor([0.0, 0.0]), T.Tensor([1.0, 0.0]))

    def test_gradients_match_fd(self):
        a = T.Tensor(RNG.normal(size=6), requires_grad=True)
        b = T.Tensor(RNG.normal(size=6), requires_grad=True)
        assert_grads_close(lambda: R.cosine_sim(a, b), [a, b], rtol=1e-6)

    def test_range_clamped(self):
        # nearly parallel vectors can round past 1.0; clamp guards it
        a = T.Tensor([1.0, 1e-200])
        b = T.Tensor([1.0, 0.0])
        assert -1.0 <= R.cosine_sim(a, b).item() <= 1.0

    @given(st.floats(min_value=0.1, max_value=100.0),
           st.floats(min_value=0.1, max_value=100.0))
    @settings(max_examples=30, deadline=None)
    def test_scale_invariance_pointwise(self, alpha, beta):
        rng = np.random.default_rng(5)
        a = rng.normal(size=4)
        b = rng.normal(size=4)
        base = R.cosine_sim(T.Tensor(a), T.Tensor(b)).item()
        scaled = R.cosine_sim(T.Tensor(alpha * a), T.Tensor(beta * b)).item()
        assert abs(base - scaled) < 1e-10


class TestTopT:
    def test_brute_force_agreement(self):
        index = R.KnowledgeIndex(matrix=RNG.normal(size=(50, 8)))
        for _ in range(20):
            q = RNG.normal(size=8)
            got = R.top_t(index, q, 5)
            sims = R.similarity_row(index, q)
            expect = sorted(range(50), key=lambda i: (-sims[i], i))[:5]
            assert list(got.entry_ids) == expect

    def test_ties_broken_by_lower_id(self):
        row = RNG.normal(size=4)
        matrix = np.stack([row * 2.0, RNG.normal(size=4), row, row * 0.5])
        index = R.KnowledgeIndex(matrix=matrix)
        got = R.top_t(index, row, 3)
        # rows 0, 2, 3 all have cosine 1; lower ids must come first
        assert list(got.entry_ids) == [0, 2, 3]
        assert got.scores[0] == got.scores[1] == got.scores[2] == 1.0

    def test_t_equals_n_returns_all_sorted(self):
        index = R.KnowledgeIndex(matrix=RNG.normal(size=(7, 4)))
        q = RNG.normal(size=4)
        got = R.top_t(index, q, 7)
        assert sorted(got.entry_ids) == list(range(7))
        assert all(got.scores[i] >= got.scores[i + 1] for i in range(6))

    def test_t_out_of_range(self):
        index = R.KnowledgeIndex(matrix=RNG.normal(size=(3, 4)))
        with pytest.raises(ValueError, match="outside"):
            R.top_t(index, RNG.normal(size=4), 4)
        with pytest.raises(ValueError, match="outside"):
            R.top_t(index, RNG.normal(size=4), 0)

    def test_planted_query_vector_ranks_first(self):
        matrix = RNG.normal(size=(30, 6))
        q = RNG.normal(size=6)
        matrix[17] = q * 3.0  # same direction, different magnitude
        index = R.KnowledgeIndex(matrix=matrix)
        got = R.top_t(index, q, 1)
        assert got.entry_ids[0] == 17
        assert abs(got.scores[0] - 1.0) < 1e-12

    def test_ranking_scale_invariant(self):
        matrix = RNG.normal(size=(40, 6))
        index = R.KnowledgeIndex(matrix=matrix)
        q = RNG.normal(size=6)
        base = R.top_t(index, q, 40).entry_ids
        scales = RNG.uniform(0.2, 5.0, size=40)
        scaled = R.KnowledgeIndex(matrix=matrix * scales[:, None])
        assert R.top_t(scaled, q * 2.5, 40).entry_ids == base

    def test_all_scores_in_unit_interval(self):
        index = R.KnowledgeIndex(matrix=RNG.normal(size=(25, 5)) * 100)
        got = R.top_t(index, RNG.normal(size=5) * 100, 25)
        assert all(-1.0 <= s <= 1.0 for s in got.scores)


class TestBuildIndex:
    def test_empty_base_rejected(self):
        kb, params, vocab, _ = tiny_setup()
        empty = K.KnowledgeBase([])
        with pytest.raises(ValueError, match="empty"):
            R.build_index(empty, params)

    def test_rows_match_single_encodes(self):
        kb, params, _, _ = tiny_setup()
        index = R.build_index(kb, params)
        assert index.matrix.shape == (len(kb), params.config.dim)
        picks = np.random.default_rng(3).choice(len(kb), size=5, replace=True)
        for i in picks:
            single = E.encode_text_only(kb[int(i)].token_ids, params)
            np.testing.assert_allclose(
                index.matrix[int(i)], single.data, rtol=1e-10, atol=1e-12
            )

    def test_rebuild_bitwise_identical(self):
        kb, params, _, _ = tiny_setup()
        a = R.build_index(kb, params)
        b = R.build_index(kb, params)
        np.testing.assert_array_equal(a.matrix, b.matrix)

    def test_version_stamp_recorded(self):
        kb, params, _, _ = tiny_setup()
        index = R.build_index(kb, params, version=42)
        assert index.version == 42

    def test_single_entry_base(self):
        kb, params, vocab, _ = tiny_setup(n_entries=1)
        index = R.build_index(kb, params)
        assert index.matrix.shape[0] == 1


class TestRetrieverLoss:
    def test_worked_example(self):
        scores = [T.Tensor(0.2), T.Tensor(0.8)]
        loss = R.retriever_loss(0.5, scores)
        target = math.tanh(0.5)
        expect = ((target - 0.2) ** 2 + (target - 0.8) ** 2) / 2.0
        assert abs(loss.item() - expect) < 1e-15
        assert abs(loss.item() - 0.091434) < 1e-4  # the quoted rounding

    def test_zero_gap_zero_scores(self):
        assert R.retriever_loss(0.0, [T.Tensor(0.0)]).item() == 0.0

    def test_saturated_target_single_zero_score(self):
        loss = R.retriever_loss(1e9, [T.Tensor(0.0)])
        assert abs(loss.item() - 1.0) < 1e-12

    def test_binary_target(self):
        loss_pos = R.retriever_loss(0.0, [T.Tensor(0.0)], binary=True)
        assert loss_pos.item() == 1.0  # target +1 at delta == 0
        loss_neg = R.retriever_loss(-0.5, [T.Tensor(0.0)], binary=True)
        assert loss_neg.item() == 1.0  # target -1
        loss_hit = R.retriever_loss(-0.5, [T.Tensor(-1.0)], binary=True)
        assert loss_hit.item() == 0.0

    def test_empty_scores_rejected(self):
        with pytest.raises(ValueError, match="no retrieved"):
            R.retriever_loss(0.5, [])

    @given(st.floats(min_value=-50, max_value=50),
           st.lists(st.floats(min_value=-1, max_value=1), min_size=1,
                    max_size=5))
    @settings(max_examples=60, deadline=None)
    def test_bounded_between_0_and_4(self, delta, sims):
        loss = R.retriever_loss(delta, [T.Tensor(s) for s in sims])
        assert 0.0 <= loss.item() <= 4.0

    def test_zero_iff_scores_equal_target(self):
        target = math.tanh(0.7)
        exact = R.retriever_loss(0.7, [T.Tensor(target), T.Tensor(target)])
        assert exact.item() == 0.0
        off = R.retriever_loss(0.7, [T.Tensor(target), T.Tensor(target - 1e-3)])
        assert off.item() > 0.0

    def test_gradients_match_fd(self):
        scores = [T.Tensor(0.3, requires_grad=True),
                  T.Tensor(-0.4, requires_grad=True)]
        assert_grads_close(lambda: R.retriever_loss(0.5, scores), scores,
                           rtol=1e-6)

    def test_gradient_step_raises_low_similarity(self):
        # one entry scored below tanh(delta); a step on L_RET alone must
        # strictly pull its similarity up
        h_qi = T.Tensor(RNG.normal(size=6), requires_grad=True)
        h_k = T.Tensor(RNG.normal(size=6), requires_grad=True)
        delta = 2.0

        def sim_value():
            return R.cosine_sim(h_qi, h_k).item()

        before = sim_value()
        assert before < math.tanh(delta)
        loss = R.retriever_loss(delta, [R.cosine_sim(h_qi, h_k)])
        T.backward(loss)
        for p in (h_qi, h_k):
            p.data -= 0.1 * p.grad
        assert sim_value() > before


class TestIndexSerialization:
    def test_round_trip(self, tmp_path):
        index = R.KnowledgeIndex(matrix=RNG.normal(size=(9, 5)))
        p = tmp_path / "index.bin"
        R.save_index(index, p)
        again = R.load_index(p)
        np.testing.assert_array_equal(again.matrix, index.matrix)

    def test_header_is_n_then_d(self, tmp_path):
        import struct
        index = R.KnowledgeIndex(matrix=np.zeros((3, 7)))
        p = tmp_path / "index.bin"
        R.save_index(index, p)
        with open(p, "rb") as fh:
            n, d = struct.unpack("<qq", fh.read(16))
        assert (n, d) == (3, 7)

    def test_trace_csv(self, tmp_path):
        p = tmp_path / "trace.csv"
        R.write_trace(p, [(0, [4, 2], [0.9, 0.1]), (1, [7], [0.5])])
        lines = p.read_text().splitlines()
        assert lines[0] == "question_id,entry_ids,scores"
        assert lines[1].startswith("0,4 2,")
        assert len(lines) == 3


class TestRetrieveOp:
    def test_retrieve_uses_query_encoder(self):
        kb, params, vocab, cfg = tiny_setup()
        index = R.build_index(kb, params)
        inp = E.build_input(question_ids=(4, 5),
                            patches=RNG.normal(size=(4, 3)))
        got = R.retrieve(inp, index, 2, params)
        with T.no_grad():
            pooled, _ = E.encode(inp, params)
        expect = R.top_t(index, pooled.data, 2)
        assert got.entry_ids == expect.entry_ids

    def test_retrieve_t_too_large(self):
        kb, params, _, _ = tiny_setup(n_entries=2)
        index = R.build_index(kb, params)
        inp = E.build_input(question_ids=(4,))
        with pytest.raises(ValueError, match="outside"):
            R.retrieve(inp, index, 3, params)
