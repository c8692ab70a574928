"""Unit tests for evaluation metrics"""

import numpy as np
import pytest

from src.exceptions import ContractError
from src.metrics import (
    alignment_diagnostics, alignment_kl_to_gold, bayes_risk_estimate, bayes_risk_losses, bleu_corpus,
    edit_distance, l1_frame_error, padded_l1_error, sentence_bleu_loss,
)
from src.seq2seq import ModelDims, ModelParams


@pytest.fixture
def params():
    """Untrained discrete model"""
    dims = ModelDims(src_vocab=5, tgt_vocab=5, embed_dim=3, hidden_dim=4, encoder_dim=4, attention_dim=3,
                     location_filters=2, location_kernel=3, max_source_len=6)
    return ModelParams.initialize(dims, seed=0)


class TestBleu:
    """Corpus and sentence BLEU"""

    def test_perfect_match(self):
        """Identical corpora score 1"""
        refs = [[1, 2, 3, 4, 5], [2, 3, 4, 5, 1, 2]]
        assert bleu_corpus(refs, refs) == pytest.approx(1.0)

    def test_no_four_gram_overlap_is_zero(self):
        """Unsmoothed BLEU is zero without a matching 4-gram"""
        assert bleu_corpus([[1, 2, 3, 4]], [[4, 3, 2, 1]]) == 0.0

    def test_reference_values(self):
        """Identical: 1; short by one token: exp(1 - 5/4); no shared 4-gram: 0"""
        assert bleu_corpus([[5, 6, 7, 8]], [[5, 6, 7, 8]]) == pytest.approx(1.0, abs=1e-4)
        assert bleu_corpus([[1, 2, 3, 4]], [[1, 2, 3, 4, 5]]) == pytest.approx(np.exp(-0.25), abs=1e-4)
        assert bleu_corpus([[1, 2, 3, 4, 1]], [[2, 1, 4, 3, 2]]) == pytest.approx(0.0, abs=1e-4)

    def test_smoothing_makes_positive(self):
        """Add-one smoothing rescues partial matches"""
        assert bleu_corpus([[1, 2, 3, 9]], [[1, 2, 3, 4]], smoothing=True) > 0.0

    def test_brevity_penalty(self):
        """A correct but short hypothesis is penalized"""
        ref = [[1, 2, 3, 4, 5, 6, 7, 8]]
        assert bleu_corpus([[1, 2, 3, 4, 5, 6]], ref) < bleu_corpus(ref, ref)

    def test_empty_corpus(self):
        """BLEU of nothing is undefined"""
        with pytest.raises(ContractError):
            bleu_corpus([], [])

    def test_count_mismatch(self):
        """One hypothesis per reference"""
        with pytest.raises(ContractError):
            bleu_corpus([[1]], [[1], [2]])

    def test_sentence_loss_range(self):
        """1 - BLEU lies in [0, 1] and is 0 for a perfect match"""
        assert sentence_bleu_loss([1, 2, 3, 4], [1, 2, 3, 4]) == pytest.approx(0.0)
        assert 0.0 <= sentence_bleu_loss([1, 2, 3, 4], [4, 1]) <= 1.0


class TestDistances:
    """Edit distance and frame errors"""

    def test_edit_distance(self):
        """Levenshtein distance on tokens"""
        assert edit_distance([1, 2, 3], [1, 2, 3]) == 0
        assert edit_distance([1, 2, 3], [1, 3]) == 1
        assert edit_distance([], [1, 2]) == 2
        assert edit_distance([1, 2, 3], [3, 2, 1]) == 2

    def test_l1_frame_error(self):
        """Mean over frames of row-wise L1"""
        a = np.array([[0.0, 0.0], [1.0, 1.0]])
        b = np.array([[1.0, 0.0], [1.0, -1.0]])
        assert l1_frame_error(a, b) == pytest.approx(1.5)

    def test_l1_shape_mismatch(self):
        """Shapes must agree"""
        with pytest.raises(ContractError):
            l1_frame_error(np.zeros((2, 2)), np.zeros((3, 2)))

    def test_padded_l1(self):
        """Missing frames count against the shorter sequence"""
        a = np.ones((1, 2))
        b = np.ones((2, 2))
        assert padded_l1_error(a, b) == pytest.approx(1.0)


class TestAlignmentDiagnostics:
    """Entropy, monotonicity, coverage and KL to gold"""

    def test_one_hot_diagonal(self):
        """A diagonal alignment has zero entropy and full monotonicity"""
        diagnostics = alignment_diagnostics(np.eye(4))
        assert diagnostics.mean_entropy == pytest.approx(0.0)
        assert diagnostics.monotonicity == 1.0
        assert np.allclose(diagnostics.coverage, 1.0)

    def test_uniform_entropy(self):
        """Uniform rows have entropy log L"""
        diagnostics = alignment_diagnostics(np.full((2, 4), 0.25))
        assert diagnostics.mean_entropy == pytest.approx(np.log(4))

    def test_reverse_is_not_monotone(self):
        """Backward moves lower monotonicity"""
        assert alignment_diagnostics(np.eye(3)[::-1]).monotonicity == 0.0

    def test_kl_to_gold(self):
        """KL is zero against itself and positive otherwise"""
        gold = np.eye(3)
        assert alignment_kl_to_gold(gold, gold) == pytest.approx(0.0, abs=1e-9)
        assert alignment_kl_to_gold(np.full((3, 3), 1 / 3), gold) == pytest.approx(np.log(3))

    def test_rejects_non_simplex(self):
        """Rows must be distributions"""
        with pytest.raises(ContractError):
            alignment_diagnostics(np.array([[0.5, 0.6]]))


class TestBayesRisk:
    """Sampled expected loss"""

    def test_estimate_is_mean_of_losses(self, params):
        """The estimate averages the per-sample losses"""
        losses = bayes_risk_losses(params, [1, 2], [1, 2], 8, np.random.default_rng(0), loss="edit")
        estimate = bayes_risk_estimate(params, [1, 2], [1, 2], 8, np.random.default_rng(0), loss="edit")
        assert estimate == pytest.approx(losses.mean())
        assert losses.shape == (8,)

    def test_custom_loss(self, params):
        """A callable loss is accepted"""
        risk = bayes_risk_estimate(params, [1], [1], 3, np.random.default_rng(1), loss=lambda r, h: 0.5)
        assert risk == pytest.approx(0.5)

    def test_needs_samples(self, params):
        """At least one sample"""
        with pytest.raises(ContractError):
            bayes_risk_estimate(params, [1], [1], 0, np.random.default_rng(0))
