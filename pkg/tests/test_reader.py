"""Answer head, loss gap, instance weighting, combined objective, inference,
and the parameter-sharing container."""

import math

import numpy as np
import pytest

from kbvqa import tensor as T
from kbvqa import encoder as E
from kbvqa import knowledge as K
from kbvqa import retriever as R
from kbvqa import reader as rd
from kbvqa.model import RetrieverReader, qi_input, qik_input

RNG = np.random.default_rng(31)


def tiny_model(seed=0, share=True, head_hidden=0, **cfg_over):
    cfg = dict(vocab_size=12, dim=8, num_blocks=1, num_heads=2, mlp_ratio=2,
               max_seq_len=24, patch_grid=2, patch_dim=3)
    cfg.update(cfg_over)
    return RetrieverReader(E.EncoderConfig(**cfg), num_answers=4,
                           share_encoders=share, head_hidden=head_hidden,
                           rng=np.random.default_rng(seed))


def entry_with(ids, idx=0):
    return K.KnowledgeEntry(id=idx, subject="s", relation="r", object="o",
                            sentence="s r o", token_ids=tuple(ids))


class TestAnswerSpace:
    def test_duplicate_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            rd.AnswerSpace(("a", "b", "a"))

    def test_lookup(self):
        sp = rd.AnswerSpace(("red", "blue"))
        assert sp.index("blue") == 1
        assert sp[0] == "red"
        assert len(sp) == 2

    def test_unknown_answer(self):
        sp = rd.AnswerSpace(("red",))
        with pytest.raises(KeyError, match="green"):
            sp.index("green")

    def test_save_load_round_trip(self, tmp_path):
        sp = rd.AnswerSpace(("red", "blue", "green"))
        p = tmp_path / "answers.txt"
        sp.save(p)
        assert rd.AnswerSpace.load(p).answers == sp.answers


class TestPredict:
    def test_zero_head_uniform(self):
        model = tiny_model(seed=1)
        model.head["w"].data[:] = 0.0
        model.head["b"].data[:] = 0.0
        qi = qi_input((4, 5), RNG.normal(size=(4, 3)))
        dist = rd.predict(qi, None, model)
        np.testing.assert_allclose(dist.probabilities(), np.full(4, 0.25),
                                   rtol=1e-15)

    def test_probabilities_simplex(self):
        model = tiny_model(seed=2)
        qi = qi_input((4, 5, 6), RNG.normal(size=(4, 3)))
        probs = rd.predict(qi, None, model).probabilities()
        assert abs(probs.sum() - 1.0) < 1e-12
        assert np.all(probs >= 0)

    def test_knowledge_changes_logits(self):
        model = tiny_model(seed=3)
        qi = qi_input((4, 5), RNG.normal(size=(4, 3)))
        plain = rd.predict(qi, None, model)
        spliced = rd.predict(qi, entry_with((6, 7)), model)
        assert not np.array_equal(plain.logits.data, spliced.logits.data)

    def test_splice_keeps_question_and_patches(self):
        qi = qi_input((4, 5), RNG.normal(size=(4, 3)))
        inp = qik_input(qi, (6, 7))
        assert list(inp.token_ids) == [0, 6, 7, 1, 4, 5, 1]
        np.testing.assert_array_equal(inp.patch_values, qi.patch_values)

    def test_hidden_head_variant(self):
        model = tiny_model(seed=4, head_hidden=6)
        qi = qi_input((4,), RNG.normal(size=(4, 3)))
        dist = rd.predict(qi, None, model)
        assert dist.logits.data.shape == (4,)


class TestCrossEntropy:
    def test_uniform_logits_log_n(self):
        dist = rd.AnswerDistribution(T.Tensor(np.zeros(4)))
        assert abs(rd.cross_entropy(dist, 2).item() - math.log(4)) < 1e-12

    def test_saturated_logit_near_zero(self):
        logits = np.zeros(4)
        logits[1] = 20.0
        loss = rd.cross_entropy(rd.AnswerDistribution(T.Tensor(logits)), 1)
        assert loss.item() < 1e-8

    def test_label_out_of_range(self):
        dist = rd.AnswerDistribution(T.Tensor(np.zeros(4)))
        with pytest.raises(IndexError, match="label"):
            rd.cross_entropy(dist, 4)

    def test_gradient_is_softmax_minus_onehot(self):
        logits = T.Tensor(RNG.normal(size=6), requires_grad=True)
        loss = rd.cross_entropy(rd.AnswerDistribution(logits), 3)
        T.backward(loss)
        expect = T.softmax_kernel(logits.data)
        expect[3] -= 1.0
        np.testing.assert_allclose(logits.grad, expect, rtol=1e-12)

    def test_nonnegative(self):
        logits = T.Tensor(RNG.normal(size=5) * 3)
        for label in range(5):
            assert rd.cross_entropy(
                rd.AnswerDistribution(logits), label).item() >= 0.0


def planted_model():
    """Hand-built weights where knowledge token 5 raises the logit of
    answer 0 and token 6 lowers it, so the sign of the loss gap is known.

    Query/key projections are zero (uniform attention), values and the
    output projection are identity, the MLP branch is zeroed, pooling is
    identity: the CLS output is its embedding plus the mean of the
    normalized rows. The head reads out one direction u; token 5 embeds
    +10u, token 6 embeds -10u.
    """
    cfg = E.EncoderConfig(vocab_size=8, dim=8, num_blocks=1, num_heads=2,
                          mlp_ratio=2, max_seq_len=16, patch_grid=2,
                          patch_dim=3, pooler="identity")
    model = RetrieverReader(cfg, num_answers=4, rng=None)
    rng = np.random.default_rng(17)
    u = rng.normal(size=8)
    u -= u.mean()
    u /= np.linalg.norm(u)
    params = model.reader_params
    params["word_emb"].data[:] = rng.normal(size=(8, 8)) * 0.01
    params["word_emb"].data[5] = 10.0 * u
    params["word_emb"].data[6] = -10.0 * u
    params["pos_emb"].data[:] = 0.0
    params["seg_emb"].data[:] = 0.0
    blk = params.blocks[0]
    blk["attn_wv"].data[:] = np.eye(8)
    blk["attn_wo"].data[:] = np.eye(8)
    # everything else stays at its zero/one initialization
    model.head["w"].data[:] = 0.0
    model.head["w"].data[:, 0] = 3.0 * u
    model.head["b"].data[:] = 0.0
    return model


class TestLossGap:
    def test_empty_knowledge_gap_is_exactly_zero(self):
        model = tiny_model(seed=5)
        qi = qi_input((4, 5), RNG.normal(size=(4, 3)))
        delta, l_qik, l_qi = rd.loss_gap(qi, entry_with(()), 1, model)
        assert delta == 0.0
        assert float(l_qik.data) == l_qi

    def test_helpful_knowledge_positive_gap(self):
        model = planted_model()
        qi = qi_input((4,), None)
        delta, _, _ = rd.loss_gap(qi, entry_with((5,)), 0, model)
        assert delta > 0.0

    def test_adversarial_knowledge_negative_gap(self):
        model = planted_model()
        qi = qi_input((4,), None)
        delta, _, _ = rd.loss_gap(qi, entry_with((6,)), 0, model)
        assert delta < 0.0

    def test_antisymmetry_under_branch_swap(self):
        model = tiny_model(seed=6)
        qi = qi_input((4, 5), RNG.normal(size=(4, 3)))
        delta, l_qik, l_qi = rd.loss_gap(qi, entry_with((6, 7)), 2, model)
        swapped = float(l_qik.data) - l_qi
        assert swapped == -delta

    def test_gap_is_exact_difference(self):
        model = tiny_model(seed=7)
        qi = qi_input((4, 5), RNG.normal(size=(4, 3)))
        delta, l_qik, l_qi = rd.loss_gap(qi, entry_with((6,)), 0, model)
        assert delta == l_qi - float(l_qik.data)


class TestWeightedLoss:
    def test_zero_gap_halves(self):
        l = T.Tensor(1.7, requires_grad=True)
        out = rd.weighted_reader_loss(0.0, l)
        assert out.item() == 0.5 * 1.7

    def test_saturation_tails(self):
        l = T.Tensor(2.0)
        low = rd.weighted_reader_loss(-10.0, l).item()
        high = rd.weighted_reader_loss(10.0, l).item()
        sig10 = 1.0 / (1.0 + math.exp(-10.0))
        assert abs(low - (1 - sig10) * 2.0) < 1e-15
        assert abs(high - sig10 * 2.0) < 1e-15

    def test_binary_keep_or_drop(self):
        l = T.Tensor(3.0)
        assert rd.weighted_reader_loss(0.5, l, binary=True).item() == 3.0
        assert rd.weighted_reader_loss(0.0, l, binary=True).item() == 0.0
        assert rd.weighted_reader_loss(-0.5, l, binary=True).item() == 0.0

    def test_weights_complementary(self):
        for delta in (-3.0, -0.7, 0.0, 0.2, 5.0):
            l = T.Tensor(1.0)
            a = rd.weighted_reader_loss(delta, l).item()
            b = rd.weighted_reader_loss(-delta, l).item()
            assert abs(a + b - 1.0) < 1e-12

    def test_gradient_equals_sigma_times_plain_gradient(self):
        model = tiny_model(seed=8)
        qi = qi_input((4, 5), RNG.normal(size=(4, 3)))
        entry = entry_with((6, 7))
        delta, l_qik, _ = rd.loss_gap(qi, entry, 1, model)
        params = model.trainable()

        T.zero_grad(params)
        T.backward(rd.weighted_reader_loss(delta, l_qik))
        weighted = [None if p.grad is None else p.grad.copy() for p in params]

        T.zero_grad(params)
        _, l_plain, _ = rd.loss_gap(qi, entry, 1, model)
        T.backward(l_plain)
        sigma = 1.0 / (1.0 + math.exp(-delta))
        for wg, p in zip(weighted, params):
            if wg is None:
                assert p.grad is None
            else:
                np.testing.assert_allclose(wg, sigma * p.grad, rtol=1e-12,
                                           atol=1e-15)


class TestCombinedLoss:
    def test_worked_arithmetic(self):
        total = rd.combined_loss([T.Tensor(1.0)], T.Tensor(0.25), 2.0)
        assert total.item() == 1.5

    def test_mean_over_entries(self):
        total = rd.combined_loss(
            [T.Tensor(1.0), T.Tensor(3.0)], T.Tensor(0.0), 1.0
        )
        assert total.item() == 2.0

    def test_lambda_zero_drops_retriever_term(self):
        l_ret = T.Tensor(0.9, requires_grad=True)
        total = rd.combined_loss([T.Tensor(1.0)], l_ret, 0.0)
        T.backward(total)
        assert l_ret.grad is None  # never entered the graph

    def test_decomposition_bit_exact(self):
        reader_losses = [T.Tensor(x) for x in (0.37, 1.91, 0.004)]
        l_ret = T.Tensor(0.618)
        for lam in (0.5, 2.0, 7.0):
            with_lam = rd.combined_loss(reader_losses, l_ret, lam).item()
            without = rd.combined_loss(reader_losses, l_ret, 0.0).item()
            assert with_lam == without + lam * 0.618

    def test_empty_losses_rejected(self):
        with pytest.raises(ValueError, match="no reader"):
            rd.combined_loss([], T.Tensor(0.0), 1.0)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            rd.combined_loss([T.Tensor(1.0)], T.Tensor(0.0), -1.0)


def retrieval_setup(seed=9):
    trips = [(f"animal{i}", "eats", f"food{i}") for i in range(5)]
    corpus = [K.flatten_triplet(*t) for t in trips] + ["what does eat"]
    vocab = K.build_vocab(corpus)
    kb = K.KnowledgeBase.from_triplets(trips, vocab)
    cfg = E.EncoderConfig(vocab_size=len(vocab), dim=8, num_blocks=1,
                          num_heads=2, mlp_ratio=2, max_seq_len=20,
                          patch_grid=2, patch_dim=3)
    model = RetrieverReader(cfg, num_answers=4,
                            rng=np.random.default_rng(seed))
    answers = rd.AnswerSpace(("a0", "a1", "a2", "a3"))
    return kb, model, answers, vocab


class TestInfer:
    def test_single_entry_forced(self):
        kb, model, answers, vocab = retrieval_setup()
        one = K.KnowledgeBase([kb[0]])
        index = R.build_index(one, model.knowledge_params)
        qi = qi_input((4, 5), RNG.normal(size=(4, 3)))
        _, entry_id, _ = rd.infer(qi, index, model, one, answers)
        assert entry_id == 0

    def test_deterministic(self):
        kb, model, answers, _ = retrieval_setup()
        index = R.build_index(kb, model.knowledge_params)
        qi = qi_input((4, 5), RNG.normal(size=(4, 3)))
        a1 = rd.infer(qi, index, model, kb, answers)[0]
        a2 = rd.infer(qi, index, model, kb, answers)[0]
        assert a1 == a2

    def test_matches_predict_on_top1(self):
        kb, model, answers, _ = retrieval_setup()
        index = R.build_index(kb, model.knowledge_params)
        qi = qi_input((4, 5), RNG.normal(size=(4, 3)))
        answer, entry_id, _ = rd.infer(qi, index, model, kb, answers)
        direct = rd.predict(qi, kb[entry_id], model)
        assert answer == answers[direct.argmax_index()]

    def test_empty_index_rejected(self):
        kb, model, answers, _ = retrieval_setup()
        empty = R.KnowledgeIndex(matrix=np.zeros((0, 8)))
        qi = qi_input((4,), None)
        with pytest.raises(ValueError):
            rd.infer(qi, empty, model, kb, answers)


class TestModelContainer:
    def test_shared_instances_are_identical(self):
        model = tiny_model(seed=10, share=True)
        assert model.query_params is model.reader_params
        assert model.knowledge_params is model.reader_params

    def test_mutation_visible_across_roles(self):
        model = tiny_model(seed=11, share=True)
        qi = qi_input((4, 5), RNG.normal(size=(4, 3)))
        before, _ = model.encode_query(qi)
        model.reader_params["word_emb"].data[4] += 1.0
        after, _ = model.encode_query(qi)
        assert not np.array_equal(before.data, after.data)

    def test_unshared_has_three_encoders(self):
        shared = tiny_model(seed=12, share=True)
        separate = tiny_model(seed=12, share=False)
        enc_size = shared.reader_params.param_count
        head_size = sum(t.data.size for t in shared.head.values())
        assert shared.param_count == enc_size + head_size
        assert separate.param_count == 3 * enc_size + head_size

    def test_trainable_has_no_duplicates(self):
        model = tiny_model(seed=13, share=True)
        ids = [id(t) for t in model.trainable()]
        assert len(ids) == len(set(ids))

    def test_checkpoint_round_trip_reproduces_predictions(self, tmp_path):
        model = tiny_model(seed=14)
        qi = qi_input((4, 5, 6), RNG.normal(size=(4, 3)))
        ref = rd.predict(qi, entry_with((7, 8)), model).logits.data
        p = tmp_path / "model.npz"
        model.save(p)
        again = RetrieverReader.load(p)
        out = rd.predict(qi, entry_with((7, 8)), again).logits.data
        np.testing.assert_array_equal(out, ref)

    def test_checkpoint_round_trip_unshared(self, tmp_path):
        model = tiny_model(seed=15, share=False)
        p = tmp_path / "model.npz"
        model.save(p)
        again = RetrieverReader.load(p)
        assert not again.share_encoders
        for name, t in model.named_parameters().items():
            np.testing.assert_array_equal(
                again.named_parameters()[name].data, t.data, err_msg=name
            )
