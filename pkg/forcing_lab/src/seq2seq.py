"""Attention-based encoder-decoder: encoder, decoder state, attention and output heads"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ContractError, DataError
from .models import AlignedPair
from .utils import derive_rng, glorot_uniform

logger = logging.getLogger(__name__)

EOS_ID = 0
ATTENTION_KINDS = ("hybrid", "general")

HistoryItem = Union[None, int, np.ndarray]


@dataclass(frozen=True)
class ModelDims:
    """
    Sizes of one encoder-attention-decoder model.

    Exactly one of `tgt_vocab` (discrete targets, EOS included) and
    `frame_dim` (continuous targets) is positive.
    """

    src_vocab: int
    tgt_vocab: int = 0
    frame_dim: int = 0
    embed_dim: int = 16
    hidden_dim: int = 32
    encoder_dim: int = 32
    attention_dim: int = 16
    attention: str = "hybrid"
    location_filters: int = 8
    location_kernel: int = 11
    reduction_factor: int = 1
    encoder_layers: int = 1
    decoder_layers: int = 1
    postnet: bool = False
    max_source_len: int = 64

    @property
    def continuous(self) -> bool:
        return self.frame_dim > 0

    @property
    def head_input_dim(self) -> int:
        return self.hidden_dim + self.encoder_dim

    def validate(self) -> None:
        problems = []
        if (self.tgt_vocab > 0) == (self.frame_dim > 0):
            problems.append("exactly one of tgt_vocab and frame_dim must be positive")
        if self.src_vocab < 2:
            problems.append("src_vocab must be >= 2")
        if self.encoder_dim % 2:
            problems.append("encoder_dim must be even (two directions)")
        if self.attention not in ATTENTION_KINDS:
            problems.append(f"attention must be one of {ATTENTION_KINDS}")
        for name in ("embed_dim", "hidden_dim", "encoder_dim", "attention_dim", "location_filters",
                     "location_kernel", "reduction_factor", "encoder_layers", "decoder_layers",
                     "max_source_len"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.reduction_factor > 1 and not self.continuous:
            problems.append("reduction_factor > 1 requires continuous targets")
        if problems:
            raise ContractError("; ".join(problems), kind="ModelDims")

    def to_dict(self) -> Dict:
        return dict(self.__dict__)


def _gru_shapes(prefix: str, n_in: int, n_hidden: int) -> Dict[str, Tuple[tuple, int, int]]:
    return {
        f"{prefix}.W": ((n_in, 3 * n_hidden), n_in, n_hidden),
        f"{prefix}.U": ((n_hidden, 3 * n_hidden), n_hidden, n_hidden),
        f"{prefix}.b": ((3 * n_hidden,), 0, 0),
    }


def parameter_shapes(dims: ModelDims) -> Dict[str, Tuple[tuple, int, int]]:
    """name -> (shape, fan_in, fan_out); fan_in == 0 marks a zero-initialized tensor."""
    shapes: Dict[str, Tuple[tuple, int, int]] = {}
    half = dims.encoder_dim // 2
    shapes["enc.embed"] = ((dims.src_vocab, dims.embed_dim), dims.src_vocab, dims.embed_dim)
    for layer in range(dims.encoder_layers):
        n_in = dims.embed_dim if layer == 0 else dims.encoder_dim
        shapes.update(_gru_shapes(f"enc.l{layer}.fwd", n_in, half))
        shapes.update(_gru_shapes(f"enc.l{layer}.bwd", n_in, half))

    if dims.continuous:
        dec_in = dims.frame_dim
    else:
        dec_in = dims.embed_dim
        shapes["dec.start"] = ((dims.embed_dim,), 1, dims.embed_dim)
        shapes["dec.embed"] = ((dims.tgt_vocab, dims.embed_dim), dims.tgt_vocab, dims.embed_dim)
    for layer in range(dims.decoder_layers):
        shapes.update(_gru_shapes(f"dec.l{layer}", dec_in if layer == 0 else dims.hidden_dim, dims.hidden_dim))

    if dims.attention == "hybrid":
        a = dims.attention_dim
        shapes["att.W"] = ((dims.hidden_dim, a), dims.hidden_dim, a)
        shapes["att.V"] = ((dims.encoder_dim, a), dims.encoder_dim, a)
        shapes["att.U"] = ((dims.location_filters, a), dims.location_filters, a)
        shapes["att.conv"] = ((dims.location_filters, 1, dims.location_kernel),
                              dims.location_kernel, dims.location_filters)
        shapes["att.b"] = ((a,), 0, 0)
        shapes["att.v"] = ((a,), a, 1)
    else:
        shapes["att.W"] = ((dims.hidden_dim, dims.encoder_dim), dims.hidden_dim, dims.encoder_dim)

    n_head = dims.head_input_dim
    if dims.continuous:
        n_out = dims.reduction_factor * dims.frame_dim
        shapes["out.W"] = ((n_head, n_out), n_head, n_out)
        shapes["out.b"] = ((n_out,), 0, 0)
        shapes["out.stop_w"] = ((n_head,), n_head, 1)
        shapes["out.stop_b"] = ((1,), 0, 0)
        if dims.postnet:
            shapes["out.post_W"] = ((dims.frame_dim, dims.frame_dim), dims.frame_dim, dims.frame_dim)
            shapes["out.post_b"] = ((dims.frame_dim,), 0, 0)
    else:
        shapes["out.W"] = ((n_head, dims.tgt_vocab), n_head, dims.tgt_vocab)
        shapes["out.b"] = ((dims.tgt_vocab,), 0, 0)
    return shapes


_GROUPS = {"theta_h": "enc.", "theta_s": "dec.", "theta_alpha": "att.", "theta_y": "out."}


@dataclass
class ModelParams:
    """The parameter set of one model, split into encoder/state/attention/output groups."""

    dims: ModelDims
    tensors: Dict[str, Tensor]

    def __post_init__(self):
        self.dims.validate()
        expected = parameter_shapes(self.dims)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ContractError(f"parameter names mismatch (missing {missing}, unexpected {extra})",
                                kind="ModelParams")
        for name, (shape, _, _) in expected.items():
            tensor = self.tensors[name]
            if tensor.shape != shape:
                raise ContractError(f"parameter '{name}' has wrong shape", kind="ModelParams",
                                    shapes=[tensor.shape, shape])
            if not np.all(np.isfinite(tensor.data)):
                raise ContractError(f"parameter '{name}' is not finite", kind="ModelParams")

    @classmethod
    def initialize(cls, dims: ModelDims, seed: int = 0) -> "ModelParams":
        """Glorot-uniform weights, zero biases, deterministic in `seed`."""
        dims.validate()
        rng = derive_rng(seed, 7)
        tensors = {}
        for name, (shape, fan_in, fan_out) in sorted(parameter_shapes(dims).items()):
            data = np.zeros(shape) if fan_in == 0 else glorot_uniform(rng, fan_in, fan_out, shape)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        logger.debug(f"Initialized model with {sum(t.size for t in tensors.values())} parameters")
        return cls(dims=dims, tensors=tensors)

    @classmethod
    def from_arrays(cls, dims: ModelDims, arrays: Dict[str, np.ndarray]) -> "ModelParams":
        return cls(dims=dims, tensors={k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> List[str]:
        return sorted(self.tensors)

    def parameters(self) -> List[Tensor]:
        return [self.tensors[n] for n in self.names()]

    def group(self, group: str) -> Dict[str, Tensor]:
        prefix = _GROUPS[group]
        return {n: t for n, t in self.tensors.items() if n.startswith(prefix)}

    @property
    def theta_h(self) -> Dict[str, Tensor]:
        return self.group("theta_h")

    @property
    def theta_s(self) -> Dict[str, Tensor]:
        return self.group("theta_s")

    @property
    def theta_alpha(self) -> Dict[str, Tensor]:
        return self.group("theta_alpha")

    @property
    def theta_y(self) -> Dict[str, Tensor]:
        return self.group("theta_y")

    @property
    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def named_arrays(self) -> Dict[str, np.ndarray]:
        return {n: self.tensors[n].data for n in self.names()}

    def grads(self) -> Dict[str, np.ndarray]:
        """Gradient per parameter; untouched parameters report zeros."""
        return {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for n, t in sorted(self.tensors.items())}

    def zero_grad(self) -> None:
        for tensor in self.tensors.values():
            tensor.zero_grad()

    def snapshot(self) -> "ModelParams":
        """Independent copy, safe to hand to another thread or process."""
        return ModelParams.from_arrays(self.dims, {n: a.copy() for n, a in self.named_arrays().items()})


@dataclass
class EncoderStates:
    """Encoding sequence h (L x encoder_dim) plus per-model cached projections."""

    h: Tensor
    _keys: Optional[Tensor] = field(default=None, repr=False)

    @property
    def length(self) -> int:
        return self.h.shape[0]

    def keys(self, params: ModelParams) -> Tensor:
        """h @ V for the hybrid score, computed once per encoding."""
        if self._keys is None:
            self._keys = self.h @ params["att.V"]
        return self._keys


@dataclass
class DecoderState:
    """Per-layer recurrent states; `s` is the top layer."""

    layers: Tuple[Tensor, ...]

    @property
    def s(self) -> Tensor:
        return self.layers[-1]


@dataclass
class Categorical:
    """Output distribution over the target vocabulary."""

    logits: Tensor
    log_probs: Tensor

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data)

    def argmax(self) -> int:
        return int(np.argmax(self.logits.data))


@dataclass
class FrameBlock:
    """reduction_factor x D predicted frames (Laplace mode) and the stop logit."""

    frames: Tensor
    stop_logit: Tensor
    post_frames: Optional[Tensor] = None

    @property
    def output(self) -> Tensor:
        return self.post_frames if self.post_frames is not None else self.frames

    def stop_probability(self) -> float:
        return float(0.5 * (1.0 + np.tanh(0.5 * self.stop_logit.item())))


def gru_cell(x: Tensor, h: Tensor, W: Tensor, U: Tensor, b: Tensor) -> Tensor:
    n = h.shape[0]
    gx = x @ W + b
    gh = h @ U
    z = ad.sigmoid(gx[:n] + gh[:n])
    r = ad.sigmoid(gx[n:2 * n] + gh[n:2 * n])
    candidate = ad.tanh(gx[2 * n:] + r * gh[2 * n:])
    return z * h + (1.0 - z) * candidate


def _run_gru(inputs: List[Tensor], params: ModelParams, prefix: str, n_hidden: int) -> List[Tensor]:
    W, U, b = params[f"{prefix}.W"], params[f"{prefix}.U"], params[f"{prefix}.b"]
    h = Tensor(np.zeros(n_hidden))
    outputs = []
    for x in inputs:
        h = gru_cell(x, h, W, U, b)
        outputs.append(h)
    return outputs


def encode(x: Sequence[int], params: ModelParams) -> EncoderStates:
    """
    Embed the source and run the bidirectional GRU stack.

    Raises:
        DataError: token outside the source vocabulary.
        ContractError: empty or over-long source.
    """
    dims = params.dims
    if not 1 <= len(x) <= dims.max_source_len:
        raise ContractError(f"source length {len(x)} outside [1, {dims.max_source_len}]", kind="encode")
    bad = [int(t) for t in x if not 0 <= int(t) < dims.src_vocab]
    if bad:
        raise DataError(f"tokens {bad} outside source vocabulary of size {dims.src_vocab}")

    embedded = ad.embedding_lookup(params["enc.embed"], list(x))
    rows = [embedded[i] for i in range(len(x))]
    half = dims.encoder_dim // 2
    for layer in range(dims.encoder_layers):
        forward = _run_gru(rows, params, f"enc.l{layer}.fwd", half)
        backward = _run_gru(rows[::-1], params, f"enc.l{layer}.bwd", half)[::-1]
        rows = [ad.concat([f, b]) for f, b in zip(forward, backward)]
    return EncoderStates(h=ad.stack(rows))


def initial_state(params: ModelParams) -> DecoderState:
    zeros = np.zeros(params.dims.hidden_dim)
    return DecoderState(layers=tuple(Tensor(zeros) for _ in range(params.dims.decoder_layers)))


def initial_alignment(length: int) -> Tensor:
    return Tensor(np.full(length, 1.0 / length))


def _history_input(y_prev: HistoryItem, params: ModelParams) -> Tensor:
    dims = params.dims
    if dims.continuous:
        if y_prev is None:
            return Tensor(np.zeros(dims.frame_dim))
        frame = ad.as_tensor(y_prev)
        if frame.shape != (dims.frame_dim,):
            raise ContractError("history frame has wrong dimension", kind="decoder_step",
                                shapes=[frame.shape, (dims.frame_dim,)])
        return frame
    if y_prev is None:
        return params["dec.start"]
    token = int(y_prev)
    if not 0 <= token < dims.tgt_vocab:
        raise ContractError(f"history token {token} outside target vocabulary", kind="decoder_step")
    return ad.reshape(ad.embedding_lookup(params["dec.embed"], [token]), (dims.embed_dim,))


def decoder_step(s_prev: DecoderState, y_prev: HistoryItem, params: ModelParams) -> DecoderState:
    """s_t = GRU(s_{t-1}, y_{t-1}); `None` history means the start token / zero frame."""
    if len(s_prev.layers) != params.dims.decoder_layers:
        raise ContractError("decoder state depth does not match the model", kind="decoder_step")
    x = _history_input(y_prev, params)
    layers = []
    for layer, h in enumerate(s_prev.layers):
        if h.shape != (params.dims.hidden_dim,):
            raise ContractError("decoder state has wrong dimension", kind="decoder_step",
                                shapes=[h.shape, (params.dims.hidden_dim,)])
        x = gru_cell(x, h, params[f"dec.l{layer}.W"], params[f"dec.l{layer}.U"], params[f"dec.l{layer}.b"])
        layers.append(x)
    return DecoderState(layers=tuple(layers))


def attend(s_t: Union[DecoderState, Tensor], h: EncoderStates, alpha_prev: Tensor,
           params: ModelParams) -> Tensor:
    """
    Alignment over source positions.

    hybrid:  score_l = v . tanh(W s_t + V h_l + U f_l + b), f = conv1d(alpha_prev)
    general: score_l = s_t^T W h_l
    """
    s = s_t.s if isinstance(s_t, DecoderState) else s_t
    alpha_prev = ad.as_tensor(alpha_prev)
    if alpha_prev.shape != (h.length,):
        raise ContractError("alpha_prev length differs from encoder length", kind="attend",
                            shapes=[alpha_prev.shape, h.h.shape])
    if params.dims.attention == "general":
        scores = h.h @ (s @ params["att.W"])
    else:
        location = ad.conv1d(ad.reshape(alpha_prev, (h.length, 1)), params["att.conv"])
        energy = ad.tanh(h.keys(params) + s @ params["att.W"] + location @ params["att.U"] + params["att.b"])
        scores = energy @ params["att.v"]
    return ad.softmax(scores)


def context(alpha: Union[Tensor, np.ndarray], h: EncoderStates) -> Tensor:
    """c = sum_l alpha_l h_l."""
    alpha = ad.as_tensor(alpha)
    if alpha.shape != (h.length,):
        raise ContractError("alignment length differs from encoder length", kind="context",
                            shapes=[alpha.shape, h.h.shape])
    return alpha @ h.h


def output_head_categorical(s_t: Tensor, c_t: Tensor, params: ModelParams) -> Categorical:
    features = ad.concat([s_t, c_t])
    logits = features @ params["out.W"] + params["out.b"]
    return Categorical(logits=logits, log_probs=ad.log_softmax(logits))


def output_head_continuous(s_t: Tensor, c_t: Tensor, params: ModelParams) -> FrameBlock:
    dims = params.dims
    features = ad.concat([s_t, c_t])
    frames = ad.reshape(features @ params["out.W"] + params["out.b"], (dims.reduction_factor, dims.frame_dim))
    stop_logit = ad.reshape(features @ params["out.stop_w"] + params["out.stop_b"], ())
    post = None
    if dims.postnet:
        post = frames + frames @ params["out.post_W"] + params["out.post_b"]
    return FrameBlock(frames=frames, stop_logit=stop_logit, post_frames=post)


def output_head(s_t: Tensor, c_t: Tensor, params: ModelParams) -> Union[Categorical, FrameBlock]:
    if params.dims.continuous:
        return output_head_continuous(s_t, c_t, params)
    return output_head_categorical(s_t, c_t, params)


# ---------------------------------------------------------------------------
# Unrolling
# ---------------------------------------------------------------------------

@dataclass
class Trace:
    """Everything one decoder unroll produced, step by step."""

    heads: List[Union[Categorical, FrameBlock]] = field(default_factory=list)
    alphas: List[Tensor] = field(default_factory=list)
    states: List[DecoderState] = field(default_factory=list)
    history: List[HistoryItem] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.heads)

    def alignment(self) -> Tensor:
        return ad.stack(self.alphas)

    def alignment_array(self) -> np.ndarray:
        return np.stack([a.data for a in self.alphas]) if self.alphas else np.zeros((0, 0))


def generated_item(head: Union[Categorical, FrameBlock], mode: str = "argmax",
                   rng: Optional[np.random.Generator] = None) -> HistoryItem:
    """The model's own output at a step: a token (argmax or sampled) or the last predicted frame."""
    if isinstance(head, FrameBlock):
        return head.output.data[-1].copy()
    if mode == "sample":
        if rng is None:
            raise ContractError("sampling requires an rng", kind="generated_item")
        probs = head.probs()
        return int(rng.choice(probs.shape[0], p=probs / probs.sum()))
    return head.argmax()


def decode_step(params: ModelParams, enc: EncoderStates, state: DecoderState, alpha_prev: Tensor,
                y_prev: HistoryItem, context_alpha=None):
    """One decoder step; the context uses `context_alpha` when given, else the model's own alignment."""
    state = decoder_step(state, y_prev, params)
    alpha = attend(state, enc, alpha_prev, params)
    c = context(alpha if context_alpha is None else context_alpha, enc)
    return state, alpha, output_head(state.s, c, params)


def unroll(params: ModelParams, x: Sequence[int], history: Sequence[HistoryItem],
           context_alignment=None, enc: Optional[EncoderStates] = None) -> Trace:
    """
    Run the decoder for len(history) steps feeding `history[t]` as y_{t-1}.

    `context_alignment` (N x L, Tensor or array) replaces the model's own
    alignment in the context vector; the own alignment is still computed
    and returned in the trace.
    """
    enc = enc if enc is not None else encode(x, params)
    if context_alignment is not None:
        rows = context_alignment.shape[0]
        if rows != len(history) or context_alignment.shape[1] != enc.length:
            raise ContractError("reference alignment does not match decode length / source length",
                                kind="unroll", shapes=[tuple(context_alignment.shape), (len(history), enc.length)])
    state = initial_state(params)
    alpha_prev = initial_alignment(enc.length)
    trace = Trace()
    for t, y_prev in enumerate(history):
        ctx_alpha = None if context_alignment is None else context_alignment[t]
        state, alpha, head = decode_step(params, enc, state, alpha_prev, y_prev, ctx_alpha)
        trace.heads.append(head)
        trace.alphas.append(alpha)
        trace.states.append(state)
        trace.history.append(y_prev)
        alpha_prev = alpha
    return trace


def rollout(params: ModelParams, x: Sequence[int], steps: int, choose, context_alignment=None) -> Trace:
    """
    Gradient-free unroll where the history is decided on the fly.

    `choose(t, head)` returns the item fed as history at step t+1.
    """
    with ad.no_grad():
        enc = encode(x, params)
        if context_alignment is not None and np.shape(context_alignment) != (steps, enc.length):
            raise ContractError("reference alignment does not match decode length / source length",
                                kind="rollout", shapes=[tuple(np.shape(context_alignment)), (steps, enc.length)])
        state = initial_state(params)
        alpha_prev = initial_alignment(enc.length)
        trace = Trace()
        y_prev: HistoryItem = None
        for t in range(steps):
            ctx_alpha = None if context_alignment is None else ad.as_tensor(context_alignment[t])
            state, alpha, head = decode_step(params, enc, state, alpha_prev, y_prev, ctx_alpha)
            trace.heads.append(head)
            trace.alphas.append(alpha)
            trace.states.append(state)
            trace.history.append(y_prev)
            alpha_prev = alpha
            y_prev = choose(t, head)
    return trace


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------

def target_tokens(pair: AlignedPair) -> List[int]:
    """Discrete decoder targets: the reference followed by EOS."""
    return [int(t) for t in pair.y] + [EOS_ID]


def decode_steps(pair: AlignedPair, dims: ModelDims) -> int:
    """Number of decoder steps that cover the reference."""
    if dims.continuous:
        r = dims.reduction_factor
        return -(-pair.target_length // r)
    return pair.target_length + 1


def padded_frames(pair: AlignedPair, dims: ModelDims) -> np.ndarray:
    """Reference frames padded (repeating the last frame) to a multiple of the reduction factor."""
    frames = np.asarray(pair.y, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != dims.frame_dim:
        raise ContractError("target frames have wrong dimension", kind="padded_frames",
                            shapes=[frames.shape, (pair.target_length, dims.frame_dim)])
    total = decode_steps(pair, dims) * dims.reduction_factor
    if total == frames.shape[0]:
        return frames
    return np.concatenate([frames, np.repeat(frames[-1:], total - frames.shape[0], axis=0)])


def reference_history(pair: AlignedPair, dims: ModelDims) -> List[HistoryItem]:
    """History items for teacher forcing: start, then y_1..y_{T-1} (last frame of each block)."""
    if dims.continuous:
        frames = padded_frames(pair, dims)
        r = dims.reduction_factor
        return [None] + [frames[(n + 1) * r - 1].copy() for n in range(decode_steps(pair, dims) - 1)]
    return [None] + target_tokens(pair)[:-1]


def check_compatible(pair: AlignedPair, dims: ModelDims) -> None:
    if pair.is_continuous != dims.continuous:
        raise ContractError("example target type does not match the model head", kind="check_compatible")
    if pair.target_length < 1:
        raise ContractError("empty target", kind="check_compatible")
