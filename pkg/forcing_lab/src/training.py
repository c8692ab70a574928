"""Adaptive-moment optimizer and the regime-agnostic training loop"""

import logging
import math
import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .exceptions import ContractError, NumericError, TrainingDivergedError
from .models import AlignedPair, MetricRecord, OptimizerConfig
from .regimes import (
    DiscriminatorParams, ModifiedAttentionForcing, AttentionForcing, ProfessorForcing,
    RegimeConfig, StepResult, regime_step,
)
from .utils import derive_rng

logger = logging.getLogger(__name__)

# Stream ids for derive_rng(seed, stream, ...)
SHUFFLE_STREAM = 1
SAMPLE_STREAM = 2
COIN_STREAM = 3

StepFn = Callable[[List[AlignedPair], object, int, np.random.Generator], StepResult]


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float):
    """Scale all gradients together so their joint L2 norm is at most `max_norm`."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = {name: g * scale for name, g in grads.items()}
    return grads, norm


class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    def __init__(self, config: OptimizerConfig, names: Sequence[str], shapes: Dict[str, tuple]):
        self.config = config
        self.t = 0
        self.m = {n: np.zeros(shapes[n]) for n in names}
        self.v = {n: np.zeros(shapes[n]) for n in names}

    @classmethod
    def for_tensors(cls, config: OptimizerConfig, tensors) -> "Adam":
        return cls(config, sorted(tensors), {n: t.shape for n, t in tensors.items()})

    def step(self, tensors, grads: Dict[str, np.ndarray]) -> float:
        """Clip, then apply one update; returns the pre-clip gradient norm."""
        grads, norm = clip_by_global_norm(grads, self.config.clip_norm)
        cfg = self.config
        self.t += 1
        correction1 = 1.0 - cfg.beta1 ** self.t
        correction2 = 1.0 - cfg.beta2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            self.m[name] = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * g
            self.v[name] = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            tensors[name].data -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
        return norm

    def state_arrays(self, prefix: str = "opt") -> Dict[str, np.ndarray]:
        arrays = {f"{prefix}/t": np.array(float(self.t))}
        for name in self.m:
            arrays[f"{prefix}/m/{name}"] = self.m[name]
            arrays[f"{prefix}/v/{name}"] = self.v[name]
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        """Restore from a checkpoint section (prefix already stripped)."""
        self.t = int(arrays["t"])
        for name in self.m:
            self.m[name] = np.array(arrays[f"m/{name}"], dtype=np.float64)
            self.v[name] = np.array(arrays[f"v/{name}"], dtype=np.float64)


@dataclass
class TrainResult:
    params: object
    log: List[MetricRecord]
    step: int
    optimizer: Adam
    disc: Optional[DiscriminatorParams] = None
    disc_optimizer: Optional[Adam] = None


def steps_per_epoch(n_examples: int, batch_size: int) -> int:
    return -(-n_examples // batch_size)


def batch_for_step(dataset: Sequence[AlignedPair], step: int, batch_size: int, seed: int) -> List[AlignedPair]:
    """The batch at global `step`: epoch-wise seeded permutation, sliced."""
    per_epoch = steps_per_epoch(len(dataset), batch_size)
    epoch, index = divmod(step, per_epoch)
    order = derive_rng(seed, SHUFFLE_STREAM, epoch).permutation(len(dataset))
    return [dataset[i] for i in order[index * batch_size:(index + 1) * batch_size]]


def _snapshot(params, step: int, snapshot_dir: Optional[str], model_id: str) -> Optional[str]:
    if not snapshot_dir:
        return None
    arrays = {f"model/{n}": a.copy() for n, a in params.named_arrays().items()}
    checkpoint = Checkpoint(model_id=model_id, arrays=arrays, step=step,
                            metadata={"dims": params.dims.to_dict(), "diverged": True})
    return save_checkpoint(checkpoint, os.path.join(snapshot_dir, "diverged.ckpt"))


def train_loop(dataset: Sequence[AlignedPair], params, regime: Optional[RegimeConfig],
               optimizer_config: OptimizerConfig,
               epochs: int, seed: int, *, disc: Optional[DiscriminatorParams] = None,
               optimizer: Optional[Adam] = None, disc_optimizer: Optional[Adam] = None,
               start_step: int = 0, max_steps: Optional[int] = None,
               metrics_sink: Optional[Callable[[MetricRecord], None]] = None,
               snapshot_dir: Optional[str] = None, model_id: str = "seq2seq",
               step_fn: Optional[StepFn] = None) -> TrainResult:
    """
    Train `params` in place under `regime` for `epochs` passes over `dataset`.

    Every random draw is derived from (seed, global step), so a run resumed
    at `start_step` with the saved optimizer state ends in the same state as
    an uninterrupted run. `max_steps` caps the global step (for interrupted
    runs). `step_fn` replaces the regime dispatch for models that are not
    seq2seq models (the downstream stage of the cascade).

    Raises:
        TrainingDivergedError: the loss became non-finite; the last finite
            parameters are written to `snapshot_dir/diverged.ckpt`.
    """
    if epochs < 0:
        raise ContractError("epochs must be >= 0")
    if regime is None and step_fn is None:
        raise ContractError("train_loop needs a regime or a step function")
    if epochs > 0 and not dataset:
        raise ContractError("cannot train on an empty dataset")
    if isinstance(regime, (AttentionForcing, ModifiedAttentionForcing)) and regime.teacher is params:
        if not regime.tied:
            raise ContractError("untied attention forcing needs a separate teacher")
    if isinstance(regime, ProfessorForcing) and disc is None:
        disc = DiscriminatorParams.for_model(params, regime.disc_hidden, seed)

    optimizer = optimizer or Adam.for_tensors(optimizer_config, params.tensors)
    if disc is not None:
        disc_optimizer = disc_optimizer or Adam.for_tensors(optimizer_config, disc.tensors)

    batch_size = optimizer_config.batch_size
    total_steps = epochs * steps_per_epoch(len(dataset), batch_size) if dataset else 0
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    per_epoch = steps_per_epoch(len(dataset), batch_size) if dataset else 1

    log: List[MetricRecord] = []

    def emit(name: str, value: float, step: int, **extra) -> None:
        record = MetricRecord(name=name, value=value, step=step, split="train", extra=extra)
        log.append(record)
        if metrics_sink is not None:
            metrics_sink(record)

    label = type(regime).__name__ if regime is not None else "custom step"
    logger.info(f"Training {label} for {total_steps - start_step} steps "
                f"(batch {batch_size}, lr {optimizer_config.learning_rate})")
    disc_update = None
    if disc is not None:
        def disc_update(grads: Dict[str, np.ndarray]) -> None:
            disc_optimizer.step(disc.tensors, grads)

    epoch_losses: List[float] = []
    for step in range(start_step, total_steps):
        batch = batch_for_step(dataset, step, batch_size, seed)
        rng = derive_rng(seed, SAMPLE_STREAM, step)
        coin_rng = derive_rng(seed, COIN_STREAM, step)
        try:
            if step_fn is not None:
                result = step_fn(batch, params, step, rng)
            else:
                result = regime_step(regime, batch, params, step, rng, coin_rng, disc, disc_update)
        except NumericError as e:
            path = _snapshot(params, step, snapshot_dir, model_id)
            raise TrainingDivergedError(f"numeric failure at step {step}: {e}", step, path) from e
        if not math.isfinite(result.loss):
            path = _snapshot(params, step, snapshot_dir, model_id)
            raise TrainingDivergedError(f"loss is {result.loss} at step {step}", step, path)

        grad_norm = optimizer.step(params.tensors, result.grads)

        emit("loss", result.loss, step)
        emit("loss_y", result.loss_y, step)
        if isinstance(regime, (AttentionForcing, ModifiedAttentionForcing)):
            emit("loss_alpha", result.loss_alpha, step)
        if result.disc_loss is not None:
            emit("disc_loss", result.disc_loss, step)
        for key, value in sorted(result.extra.items()):
            emit(key, value, step)
        emit("grad_norm", grad_norm, step)
        logger.debug(f"step {step}: loss {result.loss:.4f}")

        epoch_losses.append(result.loss)
        if (step + 1) % per_epoch == 0:
            logger.info(f"Epoch {(step + 1) // per_epoch}: mean loss {np.mean(epoch_losses):.4f}")
            epoch_losses = []

    return TrainResult(params=params, log=log, step=max(start_step, total_steps), optimizer=optimizer,
                       disc=disc, disc_optimizer=disc_optimizer)
