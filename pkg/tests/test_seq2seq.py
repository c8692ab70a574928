"""Unit tests for the encoder-attention-decoder model"""

import numpy as np
import pytest

from src import autodiff as ad
from src.exceptions import ContractError, DataError
from src.models import AlignedPair
from src.seq2seq import (
    EOS_ID, ModelDims, ModelParams, attend, context, decode_steps, encode, initial_alignment,
    initial_state, decoder_step, padded_frames, reference_history, target_tokens, unroll,
)
from src.utils import validate_simplex_rows


def small_dims(**overrides):
    base = dict(src_vocab=6, tgt_vocab=6, embed_dim=4, hidden_dim=6, encoder_dim=6, attention_dim=4,
                location_filters=2, location_kernel=3, max_source_len=8)
    base.update(overrides)
    return ModelDims(**base)


@pytest.fixture
def params():
    """Small discrete model"""
    return ModelParams.initialize(small_dims(), seed=3)


@pytest.fixture
def frame_params():
    """Small frame model with reduction factor 2"""
    return ModelParams.initialize(small_dims(tgt_vocab=0, frame_dim=3, reduction_factor=2, postnet=True), seed=3)


class TestModelDims:
    """Dimension validation"""

    def test_exactly_one_head(self):
        """Discrete and continuous heads are exclusive"""
        with pytest.raises(ContractError):
            ModelDims(src_vocab=5, tgt_vocab=5, frame_dim=3).validate()
        with pytest.raises(ContractError):
            ModelDims(src_vocab=5).validate()

    def test_reduction_factor_needs_frames(self):
        """r > 1 is only meaningful for frame targets"""
        with pytest.raises(ContractError):
            ModelDims(src_vocab=5, tgt_vocab=5, reduction_factor=2).validate()

    def test_encoder_dim_even(self):
        """Two directions split the encoder width"""
        with pytest.raises(ContractError):
            ModelDims(src_vocab=5, tgt_vocab=5, encoder_dim=7).validate()


class TestParameters:
    """Initialization and grouping"""

    def test_initialize_is_deterministic(self):
        """Same seed, same weights"""
        a = ModelParams.initialize(small_dims(), seed=1)
        b = ModelParams.initialize(small_dims(), seed=1)
        for name in a.names():
            assert np.array_equal(a[name].data, b[name].data)

    def test_groups_partition_parameters(self, params):
        """Every tensor belongs to exactly one group"""
        groups = [params.theta_h, params.theta_s, params.theta_alpha, params.theta_y]
        names = [n for g in groups for n in g]
        assert sorted(names) == params.names()

    def test_from_arrays_rejects_wrong_shape(self, params):
        """Loaded arrays must match the dimensions"""
        arrays = params.named_arrays()
        arrays["out.b"] = np.zeros(99)
        with pytest.raises(ContractError):
            ModelParams.from_arrays(params.dims, arrays)

    def test_general_attention_has_bilinear_weight(self):
        """general attention has a single score matrix"""
        p = ModelParams.initialize(small_dims(attention="general"))
        assert p["att.W"].shape == (6, 6)
        assert "att.conv" not in p.tensors


class TestEncoderAttention:
    """Encoder states and alignments"""

    def test_encoder_shape(self, params):
        """One encoder_dim vector per source token"""
        enc = encode([1, 2, 3], params)
        assert enc.h.shape == (3, 6)

    def test_unknown_token(self, params):
        """Tokens outside the source vocabulary are data errors"""
        with pytest.raises(DataError):
            encode([1, 9], params)

    def test_source_too_long(self, params):
        """Sources longer than max_source_len are refused"""
        with pytest.raises(ContractError):
            encode([1] * 9, params)

    @pytest.mark.parametrize("attention", ["hybrid", "general"])
    def test_alignment_on_simplex(self, attention):
        """Alignments are probability vectors over source positions"""
        p = ModelParams.initialize(small_dims(attention=attention), seed=0)
        enc = encode([1, 2, 3, 4], p)
        state = decoder_step(initial_state(p), None, p)
        alpha = attend(state, enc, initial_alignment(4), p)
        assert validate_simplex_rows(alpha.data[None, :])

    def test_context_is_convex_combination(self, params):
        """A one-hot alignment selects one encoder state"""
        enc = encode([1, 2, 3], params)
        c = context(np.array([0.0, 1.0, 0.0]), enc)
        assert np.allclose(c.data, enc.h.data[1])

    def test_context_shape_mismatch(self, params):
        """Alignment length must equal source length"""
        enc = encode([1, 2, 3], params)
        with pytest.raises(ContractError):
            context(np.array([0.5, 0.5]), enc)


class TestUnroll:
    """Decoder unrolling and target conventions"""

    def test_discrete_targets_end_with_eos(self):
        """EOS is appended to the reference"""
        pair = AlignedPair(x=[1, 2], y=[3, 4])
        assert target_tokens(pair) == [3, 4, EOS_ID]
        assert decode_steps(pair, small_dims()) == 3
        assert reference_history(pair, small_dims()) == [None, 3, 4]

    def test_frame_padding_to_reduction_factor(self, frame_params):
        """Frames pad with the last frame to a multiple of r"""
        frames = np.arange(15, dtype=float).reshape(5, 3)
        pair = AlignedPair(x=[1, 2], y=frames)
        padded = padded_frames(pair, frame_params.dims)
        assert padded.shape == (6, 3)
        assert np.array_equal(padded[5], frames[4])
        assert decode_steps(pair, frame_params.dims) == 3

    def test_unroll_records_every_step(self, params):
        """The trace has one head, alignment and state per history item"""
        trace = unroll(params, [1, 2, 3], [None, 4, 5])
        assert trace.steps == 3
        assert trace.alignment_array().shape == (3, 3)

    def test_context_alignment_shape_checked(self, params):
        """A reference alignment must be N x L"""
        with pytest.raises(ContractError):
            unroll(params, [1, 2, 3], [None, 4], context_alignment=np.full((3, 3), 1 / 3))

    def test_context_alignment_changes_outputs(self, params):
        """The context follows the supplied alignment"""
        own = unroll(params, [1, 2, 3], [None, 4])
        forced = unroll(params, [1, 2, 3], [None, 4], context_alignment=np.eye(3)[[2, 2]])
        assert not np.allclose(own.heads[1].log_probs.data, forced.heads[1].log_probs.data)
        assert np.allclose(own.alignment_array()[0], forced.alignment_array()[0])

    def test_frame_head_block_shape(self, frame_params):
        """Each step emits r frames, a stop logit and post-net frames"""
        with ad.no_grad():
            trace = unroll(frame_params, [1, 2], [None, np.zeros(3)])
        head = trace.heads[0]
        assert head.frames.shape == (2, 3)
        assert head.post_frames.shape == (2, 3)
        assert 0.0 < head.stop_probability() < 1.0

    def test_stacked_layers(self):
        """Deeper encoders and decoders keep the interface"""
        p = ModelParams.initialize(small_dims(encoder_layers=2, decoder_layers=2), seed=0)
        trace = unroll(p, [1, 2, 3], [None, 1])
        assert len(trace.states[0].layers) == 2
        assert trace.alignment_array().shape == (2, 3)
