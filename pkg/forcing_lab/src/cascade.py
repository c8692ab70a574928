"""Two-stage cascade: frame model x -> y, then a non-attentive upsampler y -> waveform"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decoding import attention_forced_generate, greedy_decode, teacher_forced_generate
from .exceptions import ContractError
from .metrics import padded_l1_error
from .models import UPSTREAM_MODES, AlignedPair, CascadeConfig, OptimizerConfig
from .regimes import LossParts, Objective, StepResult, run_objective
from .seq2seq import ModelParams, gru_cell
from .training import TrainResult, train_loop
from .utils import derive_rng, glorot_uniform, log_duration

logger = logging.getLogger(__name__)


@dataclass
class ToyVocoder:
    """w for frame t: k samples of A y_t plus the phase ramp j / k."""

    frame_dim: int
    samples_per_frame: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_frame < 1:
            raise ContractError("samples_per_frame must be >= 1")
        rng = derive_rng(self.seed, 11)
        self.matrix = rng.normal(size=(self.samples_per_frame, self.frame_dim)) / np.sqrt(self.frame_dim)
        self.phase = np.arange(self.samples_per_frame) / self.samples_per_frame

    def waveform(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        return (frames @ self.matrix.T + self.phase).reshape(-1)


def attach_waveforms(pairs: Sequence[AlignedPair], vocoder: ToyVocoder) -> List[AlignedPair]:
    """Copies of frame-target pairs carrying their reference waveform."""
    out = []
    for pair in pairs:
        if not pair.is_continuous:
            raise ContractError("waveforms need frame targets", kind="attach_waveforms")
        out.append(replace(pair, wave=vocoder.waveform(pair.y), meta=dict(pair.meta)))
    return out


# ---------------------------------------------------------------------------
# Downstream model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DownstreamDims:
    frame_dim: int
    samples_per_frame: int = 4
    hidden_dim: int = 16

    def to_dict(self) -> Dict:
        return {"frame_dim": self.frame_dim, "samples_per_frame": self.samples_per_frame,
                "hidden_dim": self.hidden_dim}


def downstream_shapes(dims: DownstreamDims) -> Dict[str, tuple]:
    n_in = dims.frame_dim + dims.samples_per_frame
    h, k = dims.hidden_dim, dims.samples_per_frame
    return {
        "ds.W": ((n_in, 3 * h), n_in, 3 * h),
        "ds.U": ((h, 3 * h), h, 3 * h),
        "ds.b": ((3 * h,), 0, 0),
        "ds.out_W": ((h + dims.frame_dim, k), h + dims.frame_dim, k),
        "ds.out_b": ((k,), 0, 0),
    }


@dataclass
class DownstreamParams:
    """Recurrent upsampler phi: GRU over [y_t; w block t-1], affine head on [s_t; y_t]."""

    dims: DownstreamDims
    tensors: Dict[str, Tensor]

    @classmethod
    def initialize(cls, dims: DownstreamDims, seed: int = 0) -> "DownstreamParams":
        rng = derive_rng(seed, 13)
        tensors = {}
        for name, (shape, fan_in, fan_out) in sorted(downstream_shapes(dims).items()):
            data = np.zeros(shape) if fan_in == 0 else glorot_uniform(rng, fan_in, fan_out, shape)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        return cls(dims=dims, tensors=tensors)

    @classmethod
    def from_arrays(cls, dims: DownstreamDims, arrays: Dict[str, np.ndarray]) -> "DownstreamParams":
        expected = downstream_shapes(dims)
        if set(arrays) != set(expected):
            raise ContractError("downstream parameter names mismatch", kind="DownstreamParams")
        return cls(dims=dims, tensors={k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> List[str]:
        return sorted(self.tensors)

    def parameters(self) -> List[Tensor]:
        return [self.tensors[n] for n in self.names()]

    def named_arrays(self) -> Dict[str, np.ndarray]:
        return {n: self.tensors[n].data for n in self.names()}

    def grads(self) -> Dict[str, np.ndarray]:
        return {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for n, t in sorted(self.tensors.items())}

    def zero_grad(self) -> None:
        for tensor in self.tensors.values():
            tensor.zero_grad()


def _downstream_block(frame: Tensor, previous: Tensor, s: Tensor, phi: DownstreamParams):
    s = gru_cell(ad.concat([frame, previous]), s, phi["ds.W"], phi["ds.U"], phi["ds.b"])
    block = ad.concat([s, frame]) @ phi["ds.out_W"] + phi["ds.out_b"]
    return s, block


def downstream_forward(frames: np.ndarray, phi: DownstreamParams,
                       reference_wave: Optional[np.ndarray] = None) -> Tensor:
    """
    T x k predicted samples.

    With `reference_wave` the previous block fed back is the reference
    (teacher forcing); without it, the model's own previous block.
    """
    k = phi.dims.samples_per_frame
    frames = np.asarray(frames, dtype=np.float64)
    previous_blocks = None
    if reference_wave is not None:
        previous_blocks = np.asarray(reference_wave, dtype=np.float64).reshape(-1, k)
    s = Tensor(np.zeros(phi.dims.hidden_dim))
    previous = Tensor(np.zeros(k))
    blocks = []
    for t in range(frames.shape[0]):
        s, block = _downstream_block(Tensor(frames[t]), previous, s, phi)
        blocks.append(block)
        previous = Tensor(previous_blocks[t]) if previous_blocks is not None else block
    return ad.stack(blocks)


def check_aligned(pair: AlignedPair, samples_per_frame: int) -> None:
    if pair.wave is None:
        raise ContractError("example has no waveform", kind="cascade")
    frames = np.asarray(pair.y)
    if frames.ndim != 2 or frames.shape[0] * samples_per_frame != len(pair.wave):
        raise ContractError(
            f"feature length {frames.shape[0] if frames.ndim == 2 else '?'} x {samples_per_frame} "
            f"!= waveform length {len(pair.wave)}", kind="cascade")


def downstream_loss(pair: AlignedPair, phi: DownstreamParams) -> Tensor:
    """Mean absolute sample error under teacher forcing."""
    check_aligned(pair, phi.dims.samples_per_frame)
    predicted = downstream_forward(pair.y, phi, reference_wave=pair.wave)
    target = np.asarray(pair.wave, dtype=np.float64).reshape(predicted.shape)
    return ad.mean(ad.abs_(predicted - target))


def downstream_objective(batch: Sequence[AlignedPair], phi: DownstreamParams) -> Objective:
    def evaluate() -> LossParts:
        loss = ad.mean(ad.stack([downstream_loss(pair, phi) for pair in batch]))
        return LossParts(total=loss, loss_y=loss)
    return Objective(evaluate=evaluate, inputs=phi.parameters())


def downstream_step(batch: Sequence[AlignedPair], phi: DownstreamParams, _step: int,
                    _rng: np.random.Generator) -> StepResult:
    return run_objective(downstream_objective(batch, phi), phi)


@log_duration("train_downstream")
def train_downstream(corpus: Sequence[AlignedPair], phi: DownstreamParams, optimizer_config: OptimizerConfig,
                     epochs: int, seed: int = 0, **loop_kwargs) -> TrainResult:
    """
    Teacher-forced L1 training of the upsampler on an aligned feature corpus.

    Raises:
        ContractError: any example whose feature length times k differs
            from its waveform length.
    """
    for pair in corpus:
        check_aligned(pair, phi.dims.samples_per_frame)
    return train_loop(corpus, phi, None, optimizer_config, epochs, seed, step_fn=downstream_step,
                      model_id="downstream", **loop_kwargs)


def synthesize(frames: np.ndarray, phi: DownstreamParams) -> np.ndarray:
    with ad.no_grad():
        return downstream_forward(frames, phi).data.reshape(-1)


# ---------------------------------------------------------------------------
# Corpus and pipeline
# ---------------------------------------------------------------------------

@log_duration("generate_feature_corpus")
def generate_feature_corpus(dataset: Sequence[AlignedPair], upstream: ModelParams, mode: str,
                            teacher: Optional[ModelParams] = None) -> List[AlignedPair]:
    """
    Pair each reference waveform with frames the upstream generates in a guided mode.

    teacher_forced:   reference frames as history.
    attention_forced: own frames as history, context from the teacher-forced
                      alignment of `teacher` (the upstream itself when omitted).

    Raises:
        ContractError: unguided mode, missing waveforms, or (never expected)
            a generated length that does not match the waveform.
    """
    if mode not in UPSTREAM_MODES:
        raise ContractError(
            f"mode '{mode}' gives no time alignment with the references; "
            f"corpus generation needs one of {UPSTREAM_MODES}", kind="generate_feature_corpus")
    if not upstream.dims.continuous:
        raise ContractError("cascade upstream must predict frames", kind="generate_feature_corpus")
    reference_model = teacher if teacher is not None else upstream

    corpus = []
    for pair in dataset:
        if pair.wave is None:
            raise ContractError("reference example has no waveform", kind="generate_feature_corpus")
        k, remainder = divmod(len(pair.wave), pair.target_length)
        if remainder:
            raise ContractError("waveform length is not a multiple of the frame count",
                                kind="generate_feature_corpus")
        if mode == "teacher_forced":
            frames = teacher_forced_generate(pair.x, pair, upstream).output
        else:
            alpha_ref = teacher_forced_generate(pair.x, pair, reference_model).alignment
            frames = attention_forced_generate(pair.x, alpha_ref, upstream, target_length=pair.target_length).output
        generated = AlignedPair(x=list(pair.x), y=frames, gold_alignment=pair.gold_alignment,
                                wave=pair.wave, meta={**pair.meta, "mode": mode})
        check_aligned(generated, k)
        corpus.append(generated)
    logger.info(f"Generated {len(corpus)} {mode} feature sequences")
    return corpus


@dataclass
class PipelineResult:
    wave: np.ndarray
    frames: np.ndarray
    alignment: np.ndarray
    truncated: bool
    l1: Optional[float] = None

    def to_dict(self) -> Dict:
        return {"wave": self.wave.tolist(), "frames": self.frames.tolist(), "align": self.alignment.tolist(),
                "truncated": self.truncated, "l1": self.l1}


def run_pipeline(x: Sequence[int], upstream: ModelParams, phi: DownstreamParams,
                 reference: Optional[AlignedPair] = None, max_length: int = 200) -> PipelineResult:
    """Free-running upstream, then the upsampler; L1 against the reference waveform when given."""
    decoded = greedy_decode(x, upstream, max_length=max_length)
    wave = synthesize(decoded.output, phi) if decoded.length else np.zeros(0)
    l1 = None
    if reference is not None and reference.wave is not None:
        l1 = padded_l1_error(wave.reshape(-1, 1), np.asarray(reference.wave).reshape(-1, 1))
    return PipelineResult(wave=wave, frames=decoded.output, alignment=decoded.alignment,
                          truncated=decoded.truncated, l1=l1)


def pipeline_l1(dataset: Sequence[AlignedPair], upstream: ModelParams, phi: DownstreamParams,
                max_length: int = 200) -> float:
    """Mean pipeline L1 over a held-out set with reference waveforms."""
    scores = [run_pipeline(pair.x, upstream, phi, reference=pair, max_length=max_length).l1 for pair in dataset]
    return float(np.mean(scores))


def build_cascade(dataset: Sequence[AlignedPair], upstream: ModelParams, config: CascadeConfig,
                  optimizer_config: OptimizerConfig, epochs: int,
                  teacher: Optional[ModelParams] = None) -> DownstreamParams:
    """Generate the corpus in `config.upstream_mode` and train a fresh upsampler on it."""
    corpus = generate_feature_corpus(dataset, upstream, config.upstream_mode, teacher)
    dims = DownstreamDims(frame_dim=upstream.dims.frame_dim, samples_per_frame=config.samples_per_frame,
                          hidden_dim=config.hidden_dim)
    phi = DownstreamParams.initialize(dims, config.seed)
    train_downstream(corpus, phi, optimizer_config, epochs, config.seed)
    return phi
