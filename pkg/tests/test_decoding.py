"""Unit tests for greedy, beam and guided generation"""

import numpy as np
import pytest

from src.decoding import (
    attention_forced_generate, beam_search_decode, greedy_decode, hypothesis_result, sample_decode,
    teacher_forced_generate,
)
from src.exceptions import ContractError
from src.models import AlignedPair, BeamConfig
from src.autodiff import no_grad
from src.seq2seq import EOS_ID, ModelDims, ModelParams, decode_step, encode, initial_alignment, initial_state
from src.utils import validate_simplex_rows


def dims(**overrides):
    base = dict(src_vocab=6, tgt_vocab=6, embed_dim=4, hidden_dim=6, encoder_dim=6, attention_dim=4,
                location_filters=2, location_kernel=3, max_source_len=10)
    base.update(overrides)
    return ModelDims(**base)


def exhaustive_best(x, params, max_length):
    """Best (log_prob, tokens) over every output of at most `max_length` steps"""
    found = []
    with no_grad():
        enc = encode(x, params)

        def extend(state, alpha_prev, tokens, log_prob):
            if len(tokens) == max_length:
                found.append((log_prob, tokens))
                return
            y_prev = tokens[-1] if tokens else None
            state, alpha, head = decode_step(params, enc, state, alpha_prev, y_prev)
            for token, step_lp in enumerate(head.log_probs.data):
                if token == EOS_ID:
                    found.append((log_prob + float(step_lp), tokens))
                else:
                    extend(state, alpha, tokens + [token], log_prob + float(step_lp))

        extend(initial_state(params), initial_alignment(enc.length), [], 0.0)
    return max(found, key=lambda item: item[0])


@pytest.fixture
def params():
    """Untrained discrete model"""
    return ModelParams.initialize(dims(), seed=5)


@pytest.fixture
def frame_params():
    """Untrained frame model, r = 3"""
    return ModelParams.initialize(dims(tgt_vocab=0, frame_dim=2, reduction_factor=3), seed=5)


class TestFreeRunning:
    """Greedy and sampled decoding"""

    def test_greedy_respects_max_length(self, params):
        """Output never exceeds max_length and alignment rows match tokens"""
        result = greedy_decode([1, 2, 3], params, max_length=4)
        assert result.length <= 4
        assert result.alignment.shape == (result.length, 3)
        assert EOS_ID not in result.output

    def test_truncation_flag(self, params):
        """max_length 0 truncates immediately"""
        result = greedy_decode([1, 2], params, max_length=0)
        assert result.truncated
        assert result.output == []

    def test_alignment_rows_on_simplex(self, params):
        """Every alignment row is a distribution"""
        result = greedy_decode([1, 2, 3, 4], params, max_length=6)
        if result.length:
            assert validate_simplex_rows(result.alignment)

    def test_sampling_is_seeded(self, params):
        """Same generator seed, same sample"""
        a = sample_decode([1, 2], params, np.random.default_rng(3), max_length=8)
        b = sample_decode([1, 2], params, np.random.default_rng(3), max_length=8)
        assert a.output == b.output

    def test_sampling_needs_discrete_model(self, frame_params):
        """Sampling is defined only for token outputs"""
        with pytest.raises(ContractError):
            sample_decode([1], frame_params, np.random.default_rng(0))

    def test_frame_model_emits_blocks(self, frame_params):
        """Frame decoding yields whole blocks of r frames"""
        result = greedy_decode([1, 2], frame_params, max_length=4)
        assert result.output.shape[1] == 2
        assert result.output.shape[0] % 3 == 0
        assert result.alignment.shape[0] == result.output.shape[0] // 3


class TestBeamSearch:
    """Beam search"""

    @pytest.mark.parametrize("source", [[1, 2, 3], [4], [5, 1, 2, 3, 4]])
    def test_width_one_is_greedy(self, params, source):
        """Beam width 1 reproduces greedy decoding exactly"""
        greedy = greedy_decode(source, params, max_length=12)
        beam = beam_search_decode(source, params, BeamConfig(width=1, max_length=12))
        assert beam[0].tokens == greedy.output
        assert beam[0].log_prob == pytest.approx(greedy.log_prob)

    @pytest.mark.parametrize("seed", range(100))
    def test_width_one_is_greedy_across_models(self, seed):
        """Width 1 equals greedy for many random models and sources"""
        params = ModelParams.initialize(dims(), seed=seed)
        source = [int(t) for t in np.random.default_rng(seed).integers(1, 6, size=4)]
        greedy = greedy_decode(source, params, max_length=8)
        beam = beam_search_decode(source, params, BeamConfig(width=1, max_length=8))
        assert beam[0].tokens == greedy.output
        assert beam[0].log_prob == pytest.approx(greedy.log_prob)

    @pytest.mark.parametrize("seed", range(20))
    def test_wide_beam_finds_exhaustive_best(self, seed):
        """A beam wider than the search space returns the true best output"""
        params = ModelParams.initialize(dims(src_vocab=4, tgt_vocab=4), seed=seed)
        source = [int(t) for t in np.random.default_rng(seed).integers(1, 4, size=3)]
        log_prob, tokens = exhaustive_best(source, params, max_length=3)
        best = beam_search_decode(source, params, BeamConfig(width=64, max_length=3))[0]
        assert best.tokens == tokens
        assert best.log_prob == pytest.approx(log_prob)

    def test_sorted_by_score(self, params):
        """Hypotheses come back best first"""
        hyps = beam_search_decode([1, 2, 3], params, BeamConfig(width=4, max_length=8))
        scores = [h.log_prob for h in hyps]
        assert scores == sorted(scores, reverse=True)
        assert len(hyps) <= 4

    def test_hypothesis_result(self, params):
        """A hypothesis converts to a DecodeResult with matching alignment"""
        best = beam_search_decode([1, 2], params, BeamConfig(width=2, max_length=6))[0]
        result = hypothesis_result(best, 2)
        assert result.alignment.shape == (len(best.tokens), 2)
        assert result.truncated == (not best.finished)

    def test_rejects_frame_model(self, frame_params):
        """Beam search needs a discrete head"""
        with pytest.raises(ContractError):
            beam_search_decode([1], frame_params)

    def test_invalid_width(self):
        """Beam width must be at least one"""
        with pytest.raises(ContractError):
            BeamConfig(width=0)


class TestGuidedGeneration:
    """Teacher-forced and attention-forced generation keep reference length"""

    @pytest.mark.parametrize("seed", range(5))
    def test_teacher_forced_length_discrete(self, params, seed):
        """One token per reference token"""
        rng = np.random.default_rng(seed)
        x = list(rng.integers(1, 6, size=rng.integers(1, 8)))
        y = list(rng.integers(1, 6, size=rng.integers(1, 8)))
        result = teacher_forced_generate(x, y, params)
        assert result.length == len(y)
        assert result.alignment.shape == (len(y), len(x))

    @pytest.mark.parametrize("seed", range(5))
    def test_teacher_forced_length_frames(self, frame_params, seed):
        """Frames cut to the reference length; one alignment row per block"""
        rng = np.random.default_rng(seed)
        x = list(rng.integers(1, 6, size=rng.integers(1, 8)))
        y = rng.normal(size=(int(rng.integers(1, 11)), 2))
        result = teacher_forced_generate(x, y, frame_params)
        assert result.output.shape == y.shape
        assert result.alignment.shape == (-(-len(y) // 3), len(x))

    @pytest.mark.parametrize("seed", range(5))
    def test_attention_forced_length(self, params, seed):
        """One output per reference alignment row"""
        rng = np.random.default_rng(seed)
        x = list(rng.integers(1, 6, size=rng.integers(1, 8)))
        rows = int(rng.integers(1, 9))
        alpha = rng.dirichlet(np.ones(len(x)), size=rows)
        result = attention_forced_generate(x, alpha, params)
        assert result.length == rows
        assert result.alignment.shape == (rows, len(x))

    def test_attention_forced_frames_trimmed(self, frame_params):
        """Frame output is trimmed to the target length"""
        alpha = np.full((3, 2), 0.5)
        result = attention_forced_generate([1, 2], alpha, frame_params, target_length=7)
        assert result.output.shape == (7, 2)

    def test_attention_forced_rejects_bad_alignment(self, params):
        """Rows must be on the simplex and match the source length"""
        with pytest.raises(ContractError):
            attention_forced_generate([1, 2], np.array([[0.7, 0.7]]), params)
        with pytest.raises(ContractError):
            attention_forced_generate([1, 2], np.array([[0.5, 0.25, 0.25]]), params)

    def test_teacher_forced_accepts_pair(self, params):
        """An AlignedPair can stand in for the reference"""
        pair = AlignedPair(x=[1, 2], y=[3, 3, 3])
        assert teacher_forced_generate(pair.x, pair, params).length == 3
