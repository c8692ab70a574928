"""Inference-time generation: greedy, beam, sampling and the two guided modes"""

import heapq
import logging
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .exceptions import ContractError
from .models import AlignedPair, BeamConfig, DecodeResult, Hypothesis
from .seq2seq import (
    EOS_ID, Categorical, ModelParams, decode_step, encode, initial_alignment, initial_state,
    reference_history, rollout, unroll,
)
from .utils import validate_simplex_rows

logger = logging.getLogger(__name__)

STOP_THRESHOLD = 0.5


def _free_run(x: Sequence[int], params: ModelParams, max_length: int,
              pick: Callable[[Categorical], int]) -> DecodeResult:
    """
    Feed the model its own outputs until EOS / stop flag / `max_length` decode steps.

    Alignment rows are per decode step; the EOS step of a discrete model is
    not part of the output and its row is dropped.
    """
    if max_length < 0:
        raise ContractError("max_length must be >= 0", kind="decode")
    dims = params.dims
    with ad.no_grad():
        enc = encode(x, params)
        state = initial_state(params)
        alpha_prev = initial_alignment(enc.length)
        y_prev = None
        tokens: List[int] = []
        blocks: List[np.ndarray] = []
        alphas: List[np.ndarray] = []
        log_prob = 0.0
        finished = False
        for _ in range(max_length):
            state, alpha, head = decode_step(params, enc, state, alpha_prev, y_prev)
            alpha_prev = alpha
            if dims.continuous:
                blocks.append(head.output.data.copy())
                alphas.append(alpha.data.copy())
                y_prev = head.output.data[-1].copy()
                if head.stop_probability() > STOP_THRESHOLD:
                    finished = True
                    break
                continue
            token = pick(head)
            log_prob += float(head.log_probs.data[token])
            if token == EOS_ID:
                finished = True
                break
            tokens.append(token)
            alphas.append(alpha.data.copy())
            y_prev = token

    alignment = np.stack(alphas) if alphas else np.zeros((0, enc.length))
    if not finished:
        logger.warning(f"Decoding truncated at max_length={max_length}")
    if dims.continuous:
        output = np.concatenate(blocks) if blocks else np.zeros((0, dims.frame_dim))
    else:
        output = tokens
    return DecodeResult(output=output, alignment=alignment, truncated=not finished, log_prob=log_prob)


def greedy_decode(x: Sequence[int], params: ModelParams, max_length: int = 50) -> DecodeResult:
    """Argmax token (or the predicted frame mode) at every step."""
    return _free_run(x, params, max_length, lambda head: int(np.argmax(head.log_probs.data)))


def sample_decode(x: Sequence[int], params: ModelParams, rng: np.random.Generator,
                  max_length: int = 50) -> DecodeResult:
    """Ancestral sampling from a discrete model."""
    if params.dims.continuous:
        raise ContractError("sampling is defined for discrete models only", kind="sample_decode")

    def pick(head: Categorical) -> int:
        probs = head.probs()
        return int(rng.choice(probs.shape[0], p=probs / probs.sum()))

    return _free_run(x, params, max_length, pick)


def beam_search_decode(x: Sequence[int], params: ModelParams,
                       config: Optional[BeamConfig] = None) -> List[Hypothesis]:
    """
    Keep the `width` best hypotheses, extending every unfinished one by each token.

    Finished hypotheses are carried over unchanged. The search stops when
    all kept hypotheses are finished or after `max_length` steps. Ties are
    broken by the step log-probability and then by token order, so width 1
    reproduces greedy_decode exactly. Returned sorted by score.
    """
    config = config or BeamConfig()
    if params.dims.continuous:
        raise ContractError("beam search needs a discrete-output model", kind="beam_search")
    norm = config.length_normalization

    with ad.no_grad():
        enc = encode(x, params)
        beam = [Hypothesis(tokens=[], log_prob=0.0, state=initial_state(params),
                           alpha_prev=initial_alignment(enc.length))]
        for _ in range(config.max_length):
            if all(h.finished for h in beam):
                break
            candidates = []
            for hyp in beam:
                if hyp.finished:
                    candidates.append((hyp, float("-inf")))
                    continue
                y_prev = hyp.tokens[-1] if hyp.tokens else None
                state, alpha, head = decode_step(params, enc, hyp.state, hyp.alpha_prev, y_prev)
                step_log_probs = head.log_probs.data
                for token in range(step_log_probs.shape[0]):
                    step_lp = float(step_log_probs[token])
                    finished = token == EOS_ID
                    candidates.append((Hypothesis(
                        tokens=hyp.tokens if finished else hyp.tokens + [token],
                        log_prob=hyp.log_prob + step_lp,
                        state=state,
                        alpha_prev=alpha,
                        alignments=hyp.alignments if finished else hyp.alignments + [alpha.data.copy()],
                        finished=finished,
                    ), step_lp))
            kept = heapq.nlargest(config.width, candidates, key=lambda c: (c[0].score(norm), c[1]))
            beam = [hyp for hyp, _ in kept]

    unfinished = sum(not h.finished for h in beam)
    if unfinished:
        logger.warning(f"Beam search stopped at max_length={config.max_length} "
                       f"with {unfinished} unfinished hypotheses")
    return sorted(beam, key=lambda h: h.score(norm), reverse=True)


def hypothesis_result(hyp: Hypothesis, source_length: int) -> DecodeResult:
    alignment = np.stack(hyp.alignments) if hyp.alignments else np.zeros((0, source_length))
    return DecodeResult(output=list(hyp.tokens), alignment=alignment, truncated=not hyp.finished,
                        log_prob=hyp.log_prob)


def _as_pair(x: Sequence[int], y_ref) -> AlignedPair:
    if isinstance(y_ref, AlignedPair):
        return y_ref
    y = np.asarray(y_ref, dtype=np.float64) if np.ndim(y_ref) == 2 else [int(t) for t in y_ref]
    return AlignedPair(x=list(x), y=y)


def teacher_forced_generate(x: Sequence[int], y_ref: Union[Sequence[int], np.ndarray, AlignedPair],
                            params: ModelParams) -> DecodeResult:
    """
    Guided output y' with the reference fed as history; |y'| == |y_ref|.

    Discrete: one argmax token per reference token (the EOS step is dropped).
    Continuous: the predicted frames, cut to the reference length; one
    alignment row per decode step.
    """
    pair = _as_pair(x, y_ref)
    if pair.target_length < 1:
        raise ContractError("empty reference", kind="teacher_forced_generate")
    with ad.no_grad():
        trace = unroll(params, pair.x, reference_history(pair, params.dims))
    alignment = trace.alignment_array()
    if params.dims.continuous:
        frames = np.concatenate([head.output.data for head in trace.heads])[:pair.target_length]
        return DecodeResult(output=frames, alignment=alignment)
    tokens = [head.argmax() for head in trace.heads[:pair.target_length]]
    log_prob = float(sum(head.log_probs.data[t] for head, t in zip(trace.heads, tokens)))
    return DecodeResult(output=tokens, alignment=alignment[:pair.target_length], log_prob=log_prob)


def attention_forced_generate(x: Sequence[int], alpha_ref: np.ndarray, params: ModelParams,
                              target_length: Optional[int] = None) -> DecodeResult:
    """
    Generated output history with the context taken from `alpha_ref`.

    Produces exactly one output per reference row (continuous: one block of
    reduction_factor frames per row, cut to `target_length` when given).
    The model's own alignment is returned for diagnostics only.

    Raises:
        ContractError: `alpha_ref` is not a row-stochastic N x len(x) matrix.
    """
    alpha_ref = np.asarray(alpha_ref, dtype=np.float64)
    if alpha_ref.ndim != 2 or alpha_ref.shape[1] != len(x) or alpha_ref.shape[0] < 1:
        raise ContractError("reference alignment must be N x source_length", kind="attention_forced_generate",
                            shapes=[alpha_ref.shape, (None, len(x))])
    if not validate_simplex_rows(alpha_ref):
        raise ContractError("reference alignment rows are not on the simplex", kind="attention_forced_generate")

    dims = params.dims

    def choose(_t, head):
        if dims.continuous:
            return head.output.data[-1].copy()
        return head.argmax()

    trace = rollout(params, x, alpha_ref.shape[0], choose, context_alignment=alpha_ref)
    if dims.continuous:
        frames = np.concatenate([head.output.data for head in trace.heads])
        if target_length is not None:
            if target_length > frames.shape[0]:
                raise ContractError("target_length exceeds the frames covered by the alignment",
                                    kind="attention_forced_generate")
            frames = frames[:target_length]
        return DecodeResult(output=frames, alignment=trace.alignment_array())
    tokens = [head.argmax() for head in trace.heads]
    log_prob = float(sum(head.log_probs.data[t] for head, t in zip(trace.heads, tokens)))
    return DecodeResult(output=tokens, alignment=trace.alignment_array(), log_prob=log_prob)
