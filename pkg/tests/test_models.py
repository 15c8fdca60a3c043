import numpy as np
import pytest

from specsteer.core import PrivateContext, Vocabulary, softmax
from specsteer.fusion import pmi_reward
from specsteer.models import (
    ModelError,
    ModelProfile,
    NGramModel,
    TableModel,
    condition_private,
    train_ngram,
)


def vocab_of(*docs):
    return Vocabulary.build([list(d) for d in docs])


class TestModelProfile:
    def test_valid(self):
        ModelProfile("m", 10, 2, 4, "generalist")

    def test_bad_role(self):
        with pytest.raises(ModelError):
            ModelProfile("m", 10, 2, 4, "oracle")

    def test_nonpositive_stats(self):
        with pytest.raises(ModelError):
            ModelProfile("m", 0, 2, 4, "generalist")


class TestTableModel:
    def test_single_row_roundtrip(self):
        vocab = vocab_of(["a", "b"])
        m = TableModel(vocab, {(): [0.5, 0.3, 0.2]})
        np.testing.assert_allclose(
            softmax(m.next_token_logits([0, 1])), [0.5, 0.3, 0.2], atol=1e-9
        )

    def test_fallback_to_shorter_window(self):
        vocab = vocab_of(["a", "b"])
        m = TableModel(vocab, {(): [0.5, 0.3, 0.2], (1,): [0.1, 0.8, 0.1]})
        np.testing.assert_allclose(m.next_token_probs([0, 1]), [0.1, 0.8, 0.1])
        np.testing.assert_allclose(m.next_token_probs([2, 0]), [0.5, 0.3, 0.2])

    def test_two_token_window_preferred(self):
        vocab = vocab_of(["a", "b"])
        m = TableModel(
            vocab,
            {(): [1 / 3] * 3, (1,): [0.1, 0.8, 0.1], (0, 1): [0.7, 0.2, 0.1]},
        )
        np.testing.assert_allclose(m.next_token_probs([2, 0, 1]), [0.7, 0.2, 0.1])

    def test_requires_fallback_row(self):
        vocab = vocab_of(["a", "b"])
        with pytest.raises(ModelError):
            TableModel(vocab, {(1,): [0.1, 0.8, 0.1]})

    def test_window_limit(self):
        vocab = vocab_of(["a", "b"])
        with pytest.raises(ModelError):
            TableModel(vocab, {(): [1 / 3] * 3, (0, 1, 2): [1 / 3] * 3})

    def test_unknown_token_id(self):
        vocab = vocab_of(["a"])
        m = TableModel(vocab, {(): [0.5, 0.5]})
        with pytest.raises(ModelError):
            m.next_token_probs([9])

    def test_cdf_matches_probs(self):
        vocab = vocab_of(["a", "b"])
        m = TableModel(vocab, {(): [0.5, 0.3, 0.2]})
        np.testing.assert_allclose(
            m.next_token_cdf([]), np.cumsum(m.next_token_probs([])), atol=0
        )


class TestNGramTraining:
    def test_bigram_hand_count(self):
        # corpus "a b a b": window (a) saw b twice; add-1 over V=3.
        vocab = vocab_of(["a", "b"])
        a, b = vocab.id_of("a"), vocab.id_of("b")
        m = train_ngram([[a, b, a, b]], vocab, order=2, add_k=1.0)
        p = m.next_token_probs([a])
        assert p[b] == pytest.approx((2 + 1) / (2 + 1 * 3))

    def test_unigram_hand_count(self):
        # corpus "a a a": P(a) = (3+k)/(3+kV), V=2 here.
        vocab = vocab_of(["a"])
        a = vocab.id_of("a")
        m = train_ngram([[a, a, a]], vocab, order=1, add_k=0.5)
        assert m.next_token_probs([])[a] == pytest.approx(3.5 / (3 + 0.5 * 2))

    def test_empty_corpus_error(self):
        vocab = vocab_of(["a"])
        with pytest.raises(ModelError):
            train_ngram([], vocab, order=1, add_k=1.0)
        with pytest.raises(ModelError):
            train_ngram([[]], vocab, order=1, add_k=1.0)

    def test_training_deterministic(self):
        vocab = vocab_of(["a", "b"])
        docs = [[0, 1, 2], [1, 1, 0]]
        m1 = train_ngram(docs, vocab, order=2, add_k=0.3)
        m2 = train_ngram(docs, vocab, order=2, add_k=0.3)
        for hist in ([], [0], [1], [0, 1]):
            np.testing.assert_array_equal(
                m1.next_token_probs(hist), m2.next_token_probs(hist)
            )

    def test_distributions_valid_everywhere(self):
        vocab = vocab_of(["a", "b", "c"])
        m = train_ngram([[0, 1, 2, 3]], vocab, order=3, add_k=0.1)
        for hist in ([], [0], [3, 2], [1, 1, 1]):
            p = m.next_token_probs(hist)
            assert abs(p.sum() - 1.0) < 1e-9
            assert (p > 0).all()

    def test_bad_order(self):
        vocab = vocab_of(["a"])
        with pytest.raises(ModelError):
            train_ngram([[0]], vocab, order=4, add_k=1.0)

    def test_bad_add_k(self):
        vocab = vocab_of(["a"])
        with pytest.raises(ModelError):
            train_ngram([[0]], vocab, order=1, add_k=0.0)

    def test_cdf_matches_probs(self):
        vocab = vocab_of(["a", "b"])
        m = train_ngram([[0, 1, 2]], vocab, order=2, add_k=1.0)
        np.testing.assert_allclose(
            m.next_token_cdf([0]), np.cumsum(m.next_token_probs([0])), atol=0
        )


class TestPrivateConditioning:
    def _base(self):
        vocab = vocab_of(["a", "b"])
        return vocab, train_ngram([[1, 2, 1, 2]], vocab, order=1, add_k=1.0)

    def test_mu_zero_equals_base(self):
        vocab, base = self._base()
        plus = condition_private(base, PrivateContext.from_documents([[2]]), mu=0.0)
        for hist in ([], [1], [2]):
            np.testing.assert_array_equal(
                plus.next_token_probs(hist), base.next_token_probs(hist)
            )

    def test_mu_one_private_dominates(self):
        vocab, base = self._base()
        b = vocab.id_of("b")
        plus = condition_private(
            base, PrivateContext.from_documents([[b, b, b, b]]), mu=1.0
        )
        assert plus.next_token_probs([])[b] > base.next_token_probs([])[b]

    def test_hand_blend(self):
        # mu=0.5: P(b) = 0.5*base_P(b) + 0.5*priv_P(b), both add-k tables.
        vocab, base = self._base()
        b = vocab.id_of("b")
        plus = condition_private(base, PrivateContext.from_documents([[b, b]]), mu=0.5)
        base_p = (2 + 1) / (4 + 1 * 3)
        priv_p = (2 + 1) / (2 + 1 * 3)
        assert plus.next_token_probs([])[b] == pytest.approx(0.5 * base_p + 0.5 * priv_p)

    def test_empty_context_with_mu_errors(self):
        _, base = self._base()
        with pytest.raises(ModelError):
            condition_private(base, PrivateContext.from_documents([]), mu=0.5)

    def test_base_untouched(self):
        vocab, base = self._base()
        before = base.next_token_probs([]).copy()
        condition_private(base, PrivateContext.from_documents([[2, 2]]), mu=0.9)
        np.testing.assert_array_equal(base.next_token_probs([]), before)
        assert base.mu == 0.0

    def test_role_and_name(self):
        vocab = vocab_of(["a", "b"])
        base = train_ngram(
            [[1, 2]], vocab, order=1, add_k=1.0,
            profile=ModelProfile("slm", 10, 2, 4, "specialist_generic"),
        )
        plus = condition_private(base, PrivateContext.from_documents([[1]]), mu=0.5)
        assert plus.profile.role == "specialist_private"
        assert plus.profile.name == "slm+"

    def test_reward_zero_at_mu_zero(self):
        vocab, base = self._base()
        plus = condition_private(base, PrivateContext.from_documents([[2]]), mu=0.0)
        r = pmi_reward(plus.next_token_probs([1]), base.next_token_probs([1]))
        assert np.max(np.abs(r)) < 1e-12

    def test_reward_increases_with_mu(self):
        vocab, base = self._base()
        b = vocab.id_of("b")
        ctx = PrivateContext.from_documents([[b, b, b, b, b, b]])
        rewards = []
        for mu in (0.1, 0.5, 0.9):
            plus = condition_private(base, ctx, mu)
            rewards.append(
                pmi_reward(plus.next_token_probs([]), base.next_token_probs([]))[b]
            )
        assert rewards[0] < rewards[1] < rewards[2]
