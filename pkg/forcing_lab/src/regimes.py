"""Training regimes: teacher forcing, free running, scheduled sampling, professor and attention forcing"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .exceptions import ContractError
from .models import AlignedPair, ScheduleSpec
from .seq2seq import (
    Categorical, ModelParams, Trace, check_compatible, decode_steps, generated_item, gru_cell,
    reference_history, rollout, target_tokens, unroll,
)
from .utils import derive_rng, glorot_uniform, validate_simplex_rows

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
HISTORY_MODES = ("argmax", "sample")


# ---------------------------------------------------------------------------
# Regime configuration (tagged union)
# ---------------------------------------------------------------------------

def _check_mode(mode: str) -> None:
    if mode not in HISTORY_MODES:
        raise ContractError(f"history mode must be one of {HISTORY_MODES}, got '{mode}'")


@dataclass(frozen=True)
class TeacherForcing:
    name = "tf"


@dataclass(frozen=True)
class FreeRunning:
    mode: str = "argmax"
    name = "fr"

    def __post_init__(self):
        _check_mode(self.mode)


@dataclass(frozen=True)
class ScheduledSamplingToken:
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    mode: str = "argmax"
    name = "ss_token"

    def __post_init__(self):
        _check_mode(self.mode)


@dataclass(frozen=True)
class ScheduledSamplingSeq:
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    mode: str = "argmax"
    name = "ss_seq"

    def __post_init__(self):
        _check_mode(self.mode)


@dataclass(frozen=True, eq=False)
class AttentionForcing:
    """Generated history, reference attention; `teacher` supplies the reference unless tied."""

    gamma: float = 1.0
    teacher: Optional[ModelParams] = None
    tied: bool = False
    mode: str = "argmax"
    name = "af"

    def __post_init__(self):
        if self.gamma < 0:
            raise ContractError(f"gamma must be >= 0, got {self.gamma}")
        _check_mode(self.mode)


@dataclass(frozen=True, eq=False)
class ModifiedAttentionForcing:
    """Reference history, reference attention."""

    gamma: float = 1.0
    teacher: Optional[ModelParams] = None
    tied: bool = False
    name = "maf"

    def __post_init__(self):
        if self.gamma < 0:
            raise ContractError(f"gamma must be >= 0, got {self.gamma}")


@dataclass(frozen=True)
class ProfessorForcing:
    lambda_free: float = 1.0
    lambda_teacher: float = 1.0
    use_teacher_term: bool = True
    mode: str = "argmax"
    disc_hidden: int = 16
    name = "pf"

    def __post_init__(self):
        if self.lambda_free < 0 or self.lambda_teacher < 0:
            raise ContractError("professor forcing weights must be >= 0")
        _check_mode(self.mode)


RegimeConfig = Union[TeacherForcing, FreeRunning, ScheduledSamplingToken, ScheduledSamplingSeq,
                     AttentionForcing, ModifiedAttentionForcing, ProfessorForcing]

REGIME_TYPES = {cls.name: cls for cls in (TeacherForcing, FreeRunning, ScheduledSamplingToken,
                                          ScheduledSamplingSeq, AttentionForcing,
                                          ModifiedAttentionForcing, ProfessorForcing)}


@dataclass
class StepResult:
    """Losses of one regime step plus the gradients it left on the parameters."""

    loss: float
    loss_y: float
    loss_alpha: float = 0.0
    grads: Dict[str, np.ndarray] = field(default_factory=dict)
    disc_loss: Optional[float] = None
    disc_grads: Optional[Dict[str, np.ndarray]] = None
    extra: Dict[str, float] = field(default_factory=dict)


@dataclass
class LossParts:
    total: Tensor
    loss_y: Tensor
    loss_alpha: Optional[Tensor] = None


@dataclass
class Objective:
    """A regime loss with every discrete choice already fixed; smooth in `inputs`."""

    evaluate: Callable[[], LossParts]
    inputs: List[Tensor]

    def __call__(self, *_inputs) -> Tensor:
        return self.evaluate().total


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def sequence_output_loss(trace: Trace, pair: AlignedPair, stop_weight: float = 1.0) -> Tensor:
    """
    Per-sequence output loss L_y.

    Discrete: mean per-token NLL of the reference (EOS included).
    Continuous: mean per-frame L1 over real frames (plus the post-net L1
    with equal weight when present) plus `stop_weight` x stop BCE.
    """
    first = trace.heads[0]
    if isinstance(first, Categorical):
        tokens = np.asarray(target_tokens(pair))
        if len(tokens) != trace.steps:
            raise ContractError("trace length differs from reference length", kind="sequence_output_loss",
                                shapes=[(trace.steps,), tokens.shape])
        log_probs = ad.stack([h.log_probs for h in trace.heads])
        picked = log_probs[(np.arange(len(tokens)), tokens)]
        return -ad.mean(picked)

    T = pair.target_length
    steps = trace.steps
    reference = Tensor(padded_frames_for(trace, pair)[:T])
    predicted = ad.concat([h.frames for h in trace.heads], axis=0)[:T]
    loss = ad.mean(ad.sum_(ad.abs_(predicted - reference), axis=1))
    if first.post_frames is not None:
        post = ad.concat([h.post_frames for h in trace.heads], axis=0)[:T]
        loss = loss + ad.mean(ad.sum_(ad.abs_(post - reference), axis=1))
    if stop_weight > 0:
        targets = np.zeros(steps)
        targets[-1] = 1.0
        p_stop = ad.sigmoid(ad.stack([h.stop_logit for h in trace.heads]))
        log_p = ad.log(ad.clamp_min(p_stop, PROB_FLOOR))
        log_not_p = ad.log(ad.clamp_min(1.0 - p_stop, PROB_FLOOR))
        bce = -ad.mean(log_p * targets + log_not_p * (1.0 - targets))
        loss = loss + bce * stop_weight
    return loss


def padded_frames_for(trace: Trace, pair: AlignedPair) -> np.ndarray:
    block = trace.heads[0].frames.shape
    frames = np.asarray(pair.y, dtype=np.float64)
    total = trace.steps * block[0]
    if total < frames.shape[0]:
        raise ContractError("trace covers fewer frames than the reference", kind="sequence_output_loss",
                            shapes=[(total, block[1]), frames.shape])
    if total == frames.shape[0]:
        return frames
    return np.concatenate([frames, np.repeat(frames[-1:], total - frames.shape[0], axis=0)])


def alignment_kl_loss(alpha_ref, alpha_gen, average_steps: bool = False) -> Tensor:
    """
    sum_t sum_l alpha_tl log(alpha_tl / alpha_hat_tl), both sides clamped at 1e-12.

    Lists of matrices are averaged over the batch. With `average_steps` the
    per-example sum is divided by the number of rows.
    """
    if isinstance(alpha_ref, (list, tuple)):
        if len(alpha_ref) != len(alpha_gen) or not alpha_ref:
            raise ContractError("batch sizes differ", kind="alignment_kl_loss")
        terms = [alignment_kl_loss(r, g, average_steps) for r, g in zip(alpha_ref, alpha_gen)]
        return ad.mean(ad.stack(terms))

    ref, gen = ad.as_tensor(alpha_ref), ad.as_tensor(alpha_gen)
    if ref.ndim == 1:
        ref = ad.reshape(ref, (1, ref.shape[0]))
    if gen.ndim == 1:
        gen = ad.reshape(gen, (1, gen.shape[0]))
    if ref.shape != gen.shape:
        raise ContractError("alignment shapes differ", kind="alignment_kl_loss", shapes=[ref.shape, gen.shape])
    if not (validate_simplex_rows(ref.data) and validate_simplex_rows(gen.data)):
        raise ContractError("alignments must be row-stochastic", kind="alignment_kl_loss",
                            shapes=[ref.shape, gen.shape])
    log_ratio = ad.log(ad.clamp_min(ref, PROB_FLOOR)) - ad.log(ad.clamp_min(gen, PROB_FLOOR))
    kl = ad.sum_(ref * log_ratio)
    if average_steps:
        kl = kl * (1.0 / ref.shape[0])
    return kl


def _batch_mean(terms: Sequence[Tensor]) -> Tensor:
    return ad.mean(ad.stack(list(terms)))


# ---------------------------------------------------------------------------
# History planning (the stop-gradient boundary)
# ---------------------------------------------------------------------------

def plan_history(params: ModelParams, pair: AlignedPair, coins: Optional[np.ndarray] = None,
                 mode: str = "argmax", rng: Optional[np.random.Generator] = None,
                 context_alignment: Optional[np.ndarray] = None) -> list:
    """
    Decide the history fed at every step with a gradient-free rollout.

    `coins[t]` True feeds the reference at step t, False the model's own
    previous output; `None` means always the model's own output.
    """
    check_compatible(pair, params.dims)
    reference = reference_history(pair, params.dims)
    steps = len(reference)

    def choose(t, head):
        following = t + 1
        if following >= steps:
            return None
        if coins is not None and coins[following]:
            return reference[following]
        return generated_item(head, mode, rng)

    return rollout(params, pair.x, steps, choose, context_alignment).history


def _require_batch(batch: Sequence[AlignedPair]) -> None:
    if not batch:
        raise ContractError("empty batch", kind="regime_step")


def _history_objective(params: ModelParams, batch: Sequence[AlignedPair], histories: List[list]) -> Objective:
    def evaluate() -> LossParts:
        losses = [sequence_output_loss(unroll(params, pair.x, history), pair)
                  for pair, history in zip(batch, histories)]
        loss_y = _batch_mean(losses)
        return LossParts(total=loss_y, loss_y=loss_y)
    return Objective(evaluate=evaluate, inputs=params.parameters())


def run_objective(objective: Objective, params: ModelParams) -> StepResult:
    """Evaluate on a fresh tape and backpropagate into `params`."""
    params.zero_grad()
    with Tape() as tape:
        parts = objective.evaluate()
        backward(tape, parts.total)
    return StepResult(
        loss=parts.total.item(),
        loss_y=parts.loss_y.item(),
        loss_alpha=parts.loss_alpha.item() if parts.loss_alpha is not None else 0.0,
        grads=params.grads(),
    )


# ---------------------------------------------------------------------------
# Output-history regimes
# ---------------------------------------------------------------------------

def teacher_forcing_objective(batch: Sequence[AlignedPair], params: ModelParams) -> Objective:
    _require_batch(batch)
    for pair in batch:
        check_compatible(pair, params.dims)
    return _history_objective(params, batch, [reference_history(p, params.dims) for p in batch])


def teacher_forcing_step(batch: Sequence[AlignedPair], params: ModelParams) -> StepResult:
    """History is the reference y_{1:t-1}."""
    return run_objective(teacher_forcing_objective(batch, params), params)


def free_running_objective(batch, params, mode="argmax", rng=None) -> Objective:
    _require_batch(batch)
    histories = [plan_history(params, pair, None, mode, rng) for pair in batch]
    return _history_objective(params, batch, histories)


def free_running_step(batch: Sequence[AlignedPair], params: ModelParams, mode: str = "argmax",
                      rng: Optional[np.random.Generator] = None) -> StepResult:
    """History is the model's own output; the loss still scores the reference at each step."""
    _check_mode(mode)
    return run_objective(free_running_objective(batch, params, mode, rng), params)


def token_coins(steps: int, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    return rng.random(steps) < epsilon


def scheduled_sampling_token_objective(batch, params, step_index, schedule, rng, mode="argmax",
                                       sample_rng=None) -> Objective:
    _require_batch(batch)
    epsilon = schedule.epsilon(step_index)
    histories = []
    for pair in batch:
        coins = token_coins(decode_steps(pair, params.dims), epsilon, rng)
        histories.append(plan_history(params, pair, coins, mode, sample_rng))
    return _history_objective(params, batch, histories)


def scheduled_sampling_token_step(batch: Sequence[AlignedPair], params: ModelParams, step_index: int,
                                  schedule: ScheduleSpec, rng: np.random.Generator, mode: str = "argmax",
                                  sample_rng: Optional[np.random.Generator] = None) -> StepResult:
    """Per step, feed the reference with probability epsilon(step_index), else the generated token."""
    _check_mode(mode)
    objective = scheduled_sampling_token_objective(batch, params, step_index, schedule, rng, mode, sample_rng)
    result = run_objective(objective, params)
    result.extra["epsilon"] = schedule.epsilon(step_index)
    return result


def scheduled_sampling_seq_objective(batch, params, step_index, schedule, rng, mode="argmax",
                                     sample_rng=None, forced_coins=None) -> Objective:
    _require_batch(batch)
    epsilon = schedule.epsilon(step_index)
    histories = []
    for i, pair in enumerate(batch):
        use_reference = bool(forced_coins[i]) if forced_coins is not None else bool(rng.random() < epsilon)
        coins = np.full(decode_steps(pair, params.dims), use_reference)
        histories.append(plan_history(params, pair, coins, mode, sample_rng))
    return _history_objective(params, batch, histories)


def scheduled_sampling_seq_step(batch: Sequence[AlignedPair], params: ModelParams, step_index: int,
                                schedule: ScheduleSpec, rng: np.random.Generator, mode: str = "argmax",
                                sample_rng: Optional[np.random.Generator] = None,
                                forced_coins: Optional[Sequence[bool]] = None) -> StepResult:
    """One coin per sequence picks reference or generated history for the whole sequence."""
    _check_mode(mode)
    objective = scheduled_sampling_seq_objective(batch, params, step_index, schedule, rng, mode,
                                                 sample_rng, forced_coins)
    result = run_objective(objective, params)
    result.extra["epsilon"] = schedule.epsilon(step_index)
    return result


# ---------------------------------------------------------------------------
# Attention forcing
# ---------------------------------------------------------------------------

def reference_alignment(teacher: ModelParams, pair: AlignedPair) -> np.ndarray:
    """Teacher-forced alignment of the teacher model (no gradient)."""
    with ad.no_grad():
        return unroll(teacher, pair.x, reference_history(pair, teacher.dims)).alignment_array()


def attention_forcing_objective(batch: Sequence[AlignedPair], student: ModelParams,
                                teacher: Optional[ModelParams], gamma: float, tied: bool = False,
                                reference_output_history: bool = False, mode: str = "argmax",
                                rng: Optional[np.random.Generator] = None) -> Objective:
    _require_batch(batch)
    if gamma < 0:
        raise ContractError(f"gamma must be >= 0, got {gamma}", kind="attention_forcing")
    if tied or teacher is None:
        if not tied:
            raise ContractError("attention forcing needs a teacher model unless tied", kind="attention_forcing")
        teacher = student
    if teacher.dims.continuous != student.dims.continuous:
        raise ContractError("teacher and student heads differ", kind="attention_forcing")

    references = [reference_alignment(teacher, pair) for pair in batch]
    histories = []
    for pair, alpha_ref in zip(batch, references):
        check_compatible(pair, student.dims)
        if reference_output_history:
            histories.append(reference_history(pair, student.dims))
        else:
            histories.append(plan_history(student, pair, None, mode, rng, context_alignment=alpha_ref))

    def evaluate() -> LossParts:
        output_losses, alignment_losses = [], []
        for pair, history, alpha_ref in zip(batch, histories, references):
            if tied:
                reference = unroll(student, pair.x, reference_history(pair, student.dims)).alignment()
            else:
                reference = Tensor(alpha_ref)
            trace = unroll(student, pair.x, history, context_alignment=reference)
            output_losses.append(sequence_output_loss(trace, pair))
            alignment_losses.append(alignment_kl_loss(reference, trace.alignment(), average_steps=True))
        loss_y = _batch_mean(output_losses)
        loss_alpha = _batch_mean(alignment_losses)
        total = loss_y + loss_alpha * gamma if gamma > 0 else loss_y
        return LossParts(total=total, loss_y=loss_y, loss_alpha=loss_alpha)

    return Objective(evaluate=evaluate, inputs=student.parameters())


def attention_forcing_step(batch: Sequence[AlignedPair], student: ModelParams,
                           teacher: Optional[ModelParams], gamma: float, tied: bool = False,
                           mode: str = "argmax", rng: Optional[np.random.Generator] = None) -> StepResult:
    """
    Student feeds its own outputs back, but its context uses the teacher's alignment.

    loss = L_y + gamma * KL(alpha_ref || alpha_hat), both averaged per decode step.
    """
    _check_mode(mode)
    objective = attention_forcing_objective(batch, student, teacher, gamma, tied, False, mode, rng)
    return run_objective(objective, student)


def modified_attention_forcing_step(batch: Sequence[AlignedPair], student: ModelParams,
                                    teacher: Optional[ModelParams], gamma: float,
                                    tied: bool = False) -> StepResult:
    """Reference output history with reference attention in the context."""
    objective = attention_forcing_objective(batch, student, teacher, gamma, tied, True)
    return run_objective(objective, student)


# ---------------------------------------------------------------------------
# Professor forcing
# ---------------------------------------------------------------------------

@dataclass
class DiscriminatorParams:
    """GRU classifier over behavior vectors beta_t = [s_t; alpha_t zero-padded to max_source_len]."""

    input_dim: int
    hidden_dim: int
    tensors: Dict[str, Tensor]

    @classmethod
    def initialize(cls, input_dim: int, hidden_dim: int = 16, seed: int = 0) -> "DiscriminatorParams":
        rng = derive_rng(seed, 11)
        shapes = {
            "disc.W": ((input_dim, 3 * hidden_dim), input_dim, hidden_dim),
            "disc.U": ((hidden_dim, 3 * hidden_dim), hidden_dim, hidden_dim),
            "disc.b": ((3 * hidden_dim,), 0, 0),
            "disc.w_out": ((hidden_dim,), hidden_dim, 1),
            "disc.b_out": ((1,), 0, 0),
        }
        tensors = {}
        for name, (shape, fan_in, fan_out) in sorted(shapes.items()):
            data = np.zeros(shape) if fan_in == 0 else glorot_uniform(rng, fan_in, fan_out, shape)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        return cls(input_dim=input_dim, hidden_dim=hidden_dim, tensors=tensors)

    @classmethod
    def for_model(cls, params: ModelParams, hidden_dim: int = 16, seed: int = 0) -> "DiscriminatorParams":
        return cls.initialize(params.dims.hidden_dim + params.dims.max_source_len, hidden_dim, seed)

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

    def frozen(self) -> "DiscriminatorParams":
        """Constant copy: the generator's pass must not update the discriminator."""
        return DiscriminatorParams(self.input_dim, self.hidden_dim,
                                   {n: t.detach() for n, t in self.tensors.items()})


def behavior_sequence(trace: Trace, max_source_len: int) -> Tensor:
    """beta_{1:T}, one row concat(s_t, alpha_t) per decode step."""
    rows = []
    for state, alpha in zip(trace.states, trace.alphas):
        padding = max_source_len - alpha.shape[0]
        if padding < 0:
            raise ContractError("source longer than max_source_len", kind="behavior_sequence")
        padded = ad.concat([alpha, Tensor(np.zeros(padding))]) if padding else alpha
        rows.append(ad.concat([state.s, padded]))
    return ad.stack(rows)


def discriminate(beta: Tensor, disc: DiscriminatorParams) -> Tensor:
    """Probability that a behavior sequence came from teacher forcing."""
    if beta.ndim != 2 or beta.shape[1] != disc.input_dim:
        raise ContractError("behavior vectors have wrong dimension", kind="discriminate",
                            shapes=[beta.shape, (beta.shape[0], disc.input_dim)])
    h = Tensor(np.zeros(disc.hidden_dim))
    for t in range(beta.shape[0]):
        h = gru_cell(beta[t], h, disc["disc.W"], disc["disc.U"], disc["disc.b"])
    return ad.sigmoid(ad.reshape(h @ disc["disc.w_out"] + disc["disc.b_out"], ()))


def _neg_log(p: Tensor) -> Tensor:
    return -ad.log(ad.clamp_min(p, PROB_FLOOR))


@dataclass
class ProfessorPlan:
    free_histories: List[list]
    teacher_histories: List[list]


def plan_professor(batch, gen: ModelParams, config: ProfessorForcing, rng=None) -> ProfessorPlan:
    _require_batch(batch)
    return ProfessorPlan(
        free_histories=[plan_history(gen, pair, None, config.mode, rng) for pair in batch],
        teacher_histories=[reference_history(pair, gen.dims) for pair in batch],
    )


def discriminator_objective(batch, gen: ModelParams, disc: DiscriminatorParams,
                            plan: ProfessorPlan) -> Objective:
    """Binary cross-entropy with teacher-forced behavior as the positive class."""
    with ad.no_grad():
        positives = [behavior_sequence(unroll(gen, p.x, h), gen.dims.max_source_len)
                     for p, h in zip(batch, plan.teacher_histories)]
        negatives = [behavior_sequence(unroll(gen, p.x, h), gen.dims.max_source_len)
                     for p, h in zip(batch, plan.free_histories)]

    def evaluate() -> LossParts:
        terms = [_neg_log(discriminate(pos, disc)) + _neg_log(1.0 - discriminate(neg, disc))
                 for pos, neg in zip(positives, negatives)]
        loss = _batch_mean(terms)
        return LossParts(total=loss, loss_y=loss)

    return Objective(evaluate=evaluate, inputs=disc.parameters())


def generator_objective(batch, gen: ModelParams, disc: DiscriminatorParams, config: ProfessorForcing,
                        plan: ProfessorPlan) -> Objective:
    """NLL + lambda_free * fool-in-free-running (+ lambda_teacher * fool-in-teacher-forcing)."""
    frozen = disc.frozen()
    use_free = config.lambda_free > 0
    use_teacher = config.use_teacher_term and config.lambda_teacher > 0

    def evaluate() -> LossParts:
        nll_terms, free_terms, teacher_terms = [], [], []
        for pair, tf_history, fr_history in zip(batch, plan.teacher_histories, plan.free_histories):
            tf_trace = unroll(gen, pair.x, tf_history)
            nll_terms.append(sequence_output_loss(tf_trace, pair))
            if use_teacher:
                beta_tf = behavior_sequence(tf_trace, gen.dims.max_source_len)
                teacher_terms.append(_neg_log(1.0 - discriminate(beta_tf, frozen)))
            if use_free:
                fr_trace = unroll(gen, pair.x, fr_history)
                beta_fr = behavior_sequence(fr_trace, gen.dims.max_source_len)
                free_terms.append(_neg_log(discriminate(beta_fr, frozen)))
        nll = _batch_mean(nll_terms)
        total = nll
        if use_free:
            total = total + _batch_mean(free_terms) * config.lambda_free
        if use_teacher:
            total = total + _batch_mean(teacher_terms) * config.lambda_teacher
        return LossParts(total=total, loss_y=nll)

    return Objective(evaluate=evaluate, inputs=gen.parameters())


def professor_forcing_step(batch: Sequence[AlignedPair], gen: ModelParams, disc: DiscriminatorParams,
                           config: ProfessorForcing, rng: Optional[np.random.Generator] = None,
                           disc_update: Optional[Callable[[Dict[str, np.ndarray]], None]] = None) -> StepResult:
    """
    Discriminator and generator gradients from separate passes, each with the other side frozen.

    `disc_update`, when given, applies the discriminator gradients before
    the generator pass, so the generator is scored by the updated
    discriminator. The returned StepResult carries generator grads in
    `grads` and discriminator grads in `disc_grads`.
    """
    plan = plan_professor(batch, gen, config, rng)

    disc.zero_grad()
    with Tape() as tape:
        disc_parts = discriminator_objective(batch, gen, disc, plan).evaluate()
        backward(tape, disc_parts.total)
    disc_grads = disc.grads()
    if disc_update is not None:
        disc_update(disc_grads)

    result = run_objective(generator_objective(batch, gen, disc, config, plan), gen)
    result.disc_loss = disc_parts.total.item()
    result.disc_grads = disc_grads
    return result


def discriminator_accuracy(batch, gen: ModelParams, disc: DiscriminatorParams, mode: str = "argmax",
                           rng=None) -> float:
    """Balanced accuracy at threshold 0.5 on teacher-forced vs free-running behavior."""
    plan = plan_professor(batch, gen, ProfessorForcing(mode=mode), rng)
    correct = 0
    with ad.no_grad():
        for pair, tf_history, fr_history in zip(batch, plan.teacher_histories, plan.free_histories):
            p_tf = discriminate(behavior_sequence(unroll(gen, pair.x, tf_history), gen.dims.max_source_len), disc)
            p_fr = discriminate(behavior_sequence(unroll(gen, pair.x, fr_history), gen.dims.max_source_len), disc)
            correct += int(p_tf.item() > 0.5) + int(p_fr.item() < 0.5)
    return correct / (2 * len(batch))


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def build_objective(regime: RegimeConfig, batch: Sequence[AlignedPair], params: ModelParams,
                    step_index: int = 0, rng: Optional[np.random.Generator] = None,
                    coin_rng: Optional[np.random.Generator] = None,
                    disc: Optional[DiscriminatorParams] = None) -> Objective:
    """The regime's (generator) loss as a smooth closure over `params`, for finite-difference checks."""
    if isinstance(regime, TeacherForcing):
        return teacher_forcing_objective(batch, params)
    if isinstance(regime, FreeRunning):
        return free_running_objective(batch, params, regime.mode, rng)
    if isinstance(regime, ScheduledSamplingToken):
        return scheduled_sampling_token_objective(batch, params, step_index, regime.schedule,
                                                  coin_rng or rng, regime.mode, rng)
    if isinstance(regime, ScheduledSamplingSeq):
        return scheduled_sampling_seq_objective(batch, params, step_index, regime.schedule,
                                                coin_rng or rng, regime.mode, rng)
    if isinstance(regime, AttentionForcing):
        return attention_forcing_objective(batch, params, regime.teacher, regime.gamma, regime.tied,
                                           False, regime.mode, rng)
    if isinstance(regime, ModifiedAttentionForcing):
        return attention_forcing_objective(batch, params, regime.teacher, regime.gamma, regime.tied, True)
    if isinstance(regime, ProfessorForcing):
        if disc is None:
            raise ContractError("professor forcing needs discriminator parameters", kind="build_objective")
        return generator_objective(batch, params, disc, regime, plan_professor(batch, params, regime, rng))
    raise ContractError(f"unknown regime {regime!r}", kind="build_objective")


def regime_step(regime: RegimeConfig, batch: Sequence[AlignedPair], params: ModelParams, step_index: int,
                rng: np.random.Generator, coin_rng: Optional[np.random.Generator] = None,
                disc: Optional[DiscriminatorParams] = None,
                disc_update: Optional[Callable[[Dict[str, np.ndarray]], None]] = None) -> StepResult:
    """Dispatch one training step to the regime's step function."""
    if isinstance(regime, TeacherForcing):
        return teacher_forcing_step(batch, params)
    if isinstance(regime, FreeRunning):
        return free_running_step(batch, params, regime.mode, rng)
    if isinstance(regime, ScheduledSamplingToken):
        return scheduled_sampling_token_step(batch, params, step_index, regime.schedule,
                                             coin_rng or rng, regime.mode, rng)
    if isinstance(regime, ScheduledSamplingSeq):
        return scheduled_sampling_seq_step(batch, params, step_index, regime.schedule,
                                           coin_rng or rng, regime.mode, rng)
    if isinstance(regime, AttentionForcing):
        return attention_forcing_step(batch, params, regime.teacher, regime.gamma, regime.tied,
                                      regime.mode, rng)
    if isinstance(regime, ModifiedAttentionForcing):
        return modified_attention_forcing_step(batch, params, regime.teacher, regime.gamma, regime.tied)
    if isinstance(regime, ProfessorForcing):
        if disc is None:
            raise ContractError("professor forcing needs discriminator parameters", kind="regime_step")
        return professor_forcing_step(batch, params, disc, regime, rng, disc_update)
    raise ContractError(f"unknown regime {regime!r}", kind="regime_step")
