"""Data models for the forcing lab"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Union

import numpy as np

from .exceptions import ContractError, NumericError

TASK_KINDS = ("copy", "expansion", "reorder")
REORDER_RULES = ("identity", "pair_swap", "reverse")
SCHEDULE_KINDS = ("linear", "exponential", "inverse_sigmoid")
UPSTREAM_MODES = ("teacher_forced", "attention_forced")


@dataclass(eq=False)
class AlignedPair:
    """One training example: source tokens, target tokens or frames, optional gold alignment."""

    x: List[int]
    y: Union[List[int], np.ndarray]
    gold_alignment: Optional[np.ndarray] = None
    wave: Optional[np.ndarray] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def is_continuous(self) -> bool:
        return isinstance(self.y, np.ndarray) and self.y.ndim == 2

    @property
    def source_length(self) -> int:
        return len(self.x)

    @property
    def target_length(self) -> int:
        return int(self.y.shape[0]) if self.is_continuous else len(self.y)

    def to_dict(self) -> Dict:
        """Convert the pair into a record in the dataset file format."""
        record = {
            "src": [int(t) for t in self.x],
            "tgt": self.y.tolist() if self.is_continuous else [int(t) for t in self.y],
        }
        if self.gold_alignment is not None:
            record["align"] = np.asarray(self.gold_alignment).tolist()
        if self.wave is not None:
            record["wave"] = np.asarray(self.wave).tolist()
        return record


@dataclass
class TaskSpec:
    """Synthetic task description; durations map symbol -> frames (expansion only)."""

    kind: str = "copy"
    vocab_size: int = 20
    min_len: int = 5
    max_len: int = 12
    durations: Optional[Dict[int, int]] = None
    min_duration: int = 1
    max_duration: int = 4
    reorder_rule: str = "pair_swap"
    alternative_rule: str = "reverse"
    ambiguous: bool = False
    frame_dim: int = 8
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ContractError(f"unknown task kind '{self.kind}'")
        if not 1 <= self.min_len <= self.max_len:
            raise ContractError(f"empty length range [{self.min_len}, {self.max_len}]")
        if not 1 <= self.min_duration <= self.max_duration:
            raise ContractError(f"durations must be >= 1, got [{self.min_duration}, {self.max_duration}]")
        if self.durations and min(self.durations.values()) < 1:
            raise ContractError("durations must be >= 1")
        for rule in (self.reorder_rule, self.alternative_rule):
            if rule not in REORDER_RULES:
                raise ContractError(f"unknown reorder rule '{rule}'")

    def to_dict(self) -> Dict:
        return {
            "kind": self.kind, "vocab_size": self.vocab_size,
            "min_len": self.min_len, "max_len": self.max_len,
            "durations": self.durations, "min_duration": self.min_duration,
            "max_duration": self.max_duration, "reorder_rule": self.reorder_rule,
            "alternative_rule": self.alternative_rule, "ambiguous": self.ambiguous,
            "frame_dim": self.frame_dim, "noise_std": self.noise_std, "seed": self.seed,
        }


@dataclass(frozen=True)
class ScheduleSpec:
    """Decay of the reference-history probability epsilon over training steps."""

    kind: str = "linear"
    total_steps: int = 1000
    floor: float = 0.0
    k: Optional[float] = None

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ContractError(f"unknown schedule kind '{self.kind}'")
        if self.total_steps < 1:
            raise ContractError("total_steps must be >= 1")
        if not 0.0 <= self.floor <= 1.0:
            raise ContractError("floor must lie in [0, 1]")

    def epsilon(self, step: int) -> float:
        """Probability of feeding the reference token at `step`; starts at 1, never increases."""
        step = max(0, int(step))
        if self.kind == "linear":
            value = 1.0 - step / self.total_steps
        elif self.kind == "exponential":
            base = self.k if self.k is not None else 0.01 ** (1.0 / self.total_steps)
            value = base ** step
        else:
            k = self.k if self.k is not None else max(1.0, self.total_steps / 10.0)
            value = (k / (k + math.exp(min(step / k, 700.0)))) / (k / (k + 1.0))
        return max(self.floor, min(1.0, value))


@dataclass(frozen=True)
class BeamConfig:
    """Beam search settings."""

    width: int = 10
    max_length: int = 50
    length_normalization: bool = False

    def __post_init__(self):
        if self.width < 1:
            raise ContractError(f"beam width must be >= 1, got {self.width}")
        if self.max_length < 0:
            raise ContractError("max_length must be >= 0")


@dataclass
class Hypothesis:
    """A partial or finished beam hypothesis."""

    tokens: List[int]
    log_prob: float
    state: Any
    alpha_prev: Any
    alignments: List[np.ndarray] = field(default_factory=list)
    finished: bool = False

    def score(self, length_normalization: bool = False) -> float:
        if length_normalization and self.tokens:
            return self.log_prob / len(self.tokens)
        return self.log_prob


@dataclass
class DecodeResult:
    """Output of one decode: tokens (list) or frames (T x D), and the T x L alignment."""

    output: Union[List[int], np.ndarray]
    alignment: np.ndarray
    truncated: bool = False
    log_prob: float = 0.0

    @property
    def length(self) -> int:
        return int(self.output.shape[0]) if isinstance(self.output, np.ndarray) else len(self.output)

    def to_dict(self) -> Dict:
        output = self.output.tolist() if isinstance(self.output, np.ndarray) else list(self.output)
        return {
            "out": output,
            "align": self.alignment.tolist(),
            "truncated": self.truncated,
            "log_prob": self.log_prob,
        }


@dataclass
class MetricRecord:
    """One metric value, serialized as a JSONL line."""

    name: str
    value: float
    step: int = 0
    split: str = "train"
    extra: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.value = float(self.value)
        if not math.isfinite(self.value):
            raise NumericError(f"metric '{self.name}' is not finite at step {self.step}")

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "value": self.value,
            "step": self.step,
            "split": self.split,
            **({"extra": self.extra} if self.extra else {}),
        }


@dataclass(frozen=True)
class OptimizerConfig:
    """Adaptive-moment optimizer settings."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    batch_size: int = 16

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")


@dataclass(frozen=True)
class CascadeConfig:
    """Two-stage pipeline settings; k waveform samples per frame."""

    upstream_mode: str = "attention_forced"
    samples_per_frame: int = 4
    hidden_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.upstream_mode not in UPSTREAM_MODES:
            raise ContractError(
                f"upstream mode '{self.upstream_mode}' cannot build an aligned corpus; "
                f"use one of {UPSTREAM_MODES}"
            )
        if self.samples_per_frame < 1:
            raise ContractError("samples_per_frame must be >= 1")
