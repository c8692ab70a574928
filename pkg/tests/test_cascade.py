"""Unit tests for the two-stage cascade"""

import numpy as np
import pytest

from src.cascade import (
    DownstreamDims, DownstreamParams, ToyVocoder, attach_waveforms, downstream_forward, generate_feature_corpus,
    pipeline_l1, run_pipeline, synthesize, train_downstream,
)
from src.exceptions import ContractError
from src.experiment import toy_batches, toy_dims
from src.models import AlignedPair, OptimizerConfig
from src.seq2seq import ModelParams

SAMPLES_PER_FRAME = 3


@pytest.fixture
def references():
    """Frame examples with their toy waveforms"""
    vocoder = ToyVocoder(frame_dim=2, samples_per_frame=SAMPLES_PER_FRAME, seed=0)
    return attach_waveforms(toy_batches()["continuous"], vocoder)


@pytest.fixture
def upstream():
    """Untrained frame model with r = 2"""
    return ModelParams.initialize(toy_dims(continuous=True), seed=0)


@pytest.fixture
def phi():
    """Untrained upsampler"""
    return DownstreamParams.initialize(DownstreamDims(frame_dim=2, samples_per_frame=SAMPLES_PER_FRAME,
                                                      hidden_dim=4), seed=0)


class TestVocoder:
    """Reference waveforms"""

    def test_length_is_k_per_frame(self, references):
        """k samples per frame"""
        for pair in references:
            assert len(pair.wave) == SAMPLES_PER_FRAME * pair.y.shape[0]

    def test_token_targets_refused(self):
        """Only frame targets have waveforms"""
        with pytest.raises(ContractError):
            attach_waveforms(toy_batches()["discrete"], ToyVocoder(frame_dim=2))

    def test_deterministic(self):
        """The vocoder depends only on its seed"""
        frames = np.ones((2, 2))
        assert np.array_equal(ToyVocoder(2, 3, seed=1).waveform(frames), ToyVocoder(2, 3, seed=1).waveform(frames))


class TestFeatureCorpus:
    """Guided feature generation"""

    @pytest.mark.parametrize("mode", ["teacher_forced", "attention_forced"])
    def test_lengths_match_waveforms(self, references, upstream, mode):
        """Every generated sequence is time-aligned with its waveform"""
        corpus = generate_feature_corpus(references, upstream, mode)
        for generated, reference in zip(corpus, references):
            assert generated.y.shape == reference.y.shape
            assert len(generated.wave) == SAMPLES_PER_FRAME * generated.y.shape[0]
            assert generated.meta["mode"] == mode

    def test_free_running_refused(self, references, upstream):
        """Free running gives no time alignment"""
        with pytest.raises(ContractError):
            generate_feature_corpus(references, upstream, "free")

    def test_missing_waveform(self, upstream):
        """References need waveforms"""
        with pytest.raises(ContractError):
            generate_feature_corpus(toy_batches()["continuous"], upstream, "teacher_forced")

    def test_token_upstream_refused(self, references):
        """The upstream must predict frames"""
        with pytest.raises(ContractError):
            generate_feature_corpus(references, ModelParams.initialize(toy_dims(), 0), "teacher_forced")


class TestDownstream:
    """The upsampler"""

    def test_forward_shape(self, phi):
        """T frames give T blocks of k samples"""
        assert downstream_forward(np.zeros((5, 2)), phi).shape == (5, SAMPLES_PER_FRAME)
        assert synthesize(np.zeros((5, 2)), phi).shape == (5 * SAMPLES_PER_FRAME,)

    def test_training_reduces_loss(self, references, phi):
        """Teacher-forced L1 drops on a tiny corpus"""
        result = train_downstream(references, phi, OptimizerConfig(learning_rate=0.02, batch_size=2), epochs=20)
        losses = [r.value for r in result.log if r.name == "loss"]
        assert losses[-1] < losses[0]

    def test_misaligned_corpus_refused(self, phi):
        """Feature length times k must equal the waveform length"""
        bad = AlignedPair(x=[1], y=np.zeros((2, 2)), wave=np.zeros(5))
        with pytest.raises(ContractError):
            train_downstream([bad], phi, OptimizerConfig(), epochs=1)


class TestPipeline:
    """Free-running upstream followed by the upsampler"""

    def test_run_pipeline(self, references, upstream, phi):
        """Waveform length follows the generated frames"""
        result = run_pipeline(references[0].x, upstream, phi, reference=references[0], max_length=6)
        assert len(result.wave) == SAMPLES_PER_FRAME * result.frames.shape[0]
        assert result.l1 is not None and result.l1 >= 0

    def test_pipeline_l1(self, references, upstream, phi):
        """The held-out score is finite"""
        assert np.isfinite(pipeline_l1(references, upstream, phi, max_length=6))
