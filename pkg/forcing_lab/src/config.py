"""Run configuration: sectioned YAML over in-code defaults"""

import copy
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

import yaml

from .checkpoint import config_digest
from .exceptions import ConfigError, ContractError
from .models import (
    SCHEDULE_KINDS, TASK_KINDS, UPSTREAM_MODES, BeamConfig, CascadeConfig, OptimizerConfig,
    ScheduleSpec, TaskSpec,
)
from .regimes import (
    HISTORY_MODES, REGIME_TYPES, AttentionForcing, FreeRunning, ModifiedAttentionForcing,
    ProfessorForcing, RegimeConfig, ScheduledSamplingSeq, ScheduledSamplingToken, TeacherForcing,
)
from .seq2seq import ATTENTION_KINDS, ModelDims

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "FORCING_LAB_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"

# gamma when the config leaves it unset: KL and NLL have similar ranges for
# token targets; frame L1 is far larger than the per-step KL.
DEFAULT_GAMMA = {"discrete": 1.0, "continuous": 50.0}

DEFAULT_CONFIG: Dict[str, Dict[str, Any]] = {
    "task": {
        "kind": "copy",
        "vocab_size": 20,
        "min_len": 5,
        "max_len": 12,
        "durations": None,
        "min_duration": 1,
        "max_duration": 4,
        "reorder_rule": "pair_swap",
        "alternative_rule": "reverse",
        "ambiguous": False,
        "frame_dim": 8,
        "noise_std": 0.05,
        "train_size": 512,
        "valid_size": 64,
        "train_file": None,
        "valid_file": None,
    },
    "model": {
        "embed_dim": 16,
        "hidden_dim": 32,
        "encoder_dim": 32,
        "attention_dim": 16,
        "attention": "hybrid",
        "location_filters": 8,
        "location_kernel": 11,
        "reduction_factor": 1,
        "encoder_layers": 1,
        "decoder_layers": 1,
        "postnet": False,
        "max_source_len": 64,
    },
    "regime": {
        "name": "tf",
        "mode": "argmax",
        "gamma": None,
        "tied": False,
        "teacher_epochs": None,
    },
    "optimizer": {
        "learning_rate": 0.001,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1.0e-8,
        "clip_norm": 1.0,
        "batch_size": 16,
    },
    "training": {
        "epochs": 10,
        "max_steps": None,
        "seed": 0,
    },
    "schedule": {
        "kind": "linear",
        "total_steps": 1000,
        "floor": 0.0,
        "k": None,
    },
    "professor": {
        "lambda_free": 1.0,
        "lambda_teacher": 1.0,
        "use_teacher_term": True,
        "disc_hidden": 16,
    },
    "cascade": {
        "upstream_mode": "attention_forced",
        "samples_per_frame": 4,
        "hidden_dim": 16,
        "epochs": 10,
    },
    "evaluation": {
        "max_length": 50,
        "beam_width": 10,
        "length_normalization": False,
        "bleu_smoothing": False,
        "bayes_risk_samples": 0,
        "bayes_risk_loss": "bleu",
    },
    "output": {
        "dir": None,
        "metrics_file": "metrics.jsonl",
        "checkpoint_file": "model.ckpt",
    },
}

# (section, key) -> allowed values
_CHOICES = {
    ("task", "kind"): TASK_KINDS,
    ("model", "attention"): ATTENTION_KINDS,
    ("regime", "name"): tuple(REGIME_TYPES),
    ("regime", "mode"): HISTORY_MODES,
    ("schedule", "kind"): SCHEDULE_KINDS,
    ("cascade", "upstream_mode"): UPSTREAM_MODES,
    ("evaluation", "bayes_risk_loss"): ("bleu", "edit"),
}

_POSITIVE = {
    ("task", "vocab_size"), ("task", "min_len"), ("task", "max_len"), ("task", "frame_dim"),
    ("model", "embed_dim"), ("model", "hidden_dim"), ("model", "encoder_dim"), ("model", "attention_dim"),
    ("model", "location_filters"), ("model", "location_kernel"), ("model", "reduction_factor"),
    ("model", "encoder_layers"), ("model", "decoder_layers"), ("model", "max_source_len"),
    ("optimizer", "learning_rate"), ("optimizer", "batch_size"), ("schedule", "total_steps"),
    ("cascade", "samples_per_frame"), ("cascade", "hidden_dim"), ("evaluation", "beam_width"),
}

_NON_NEGATIVE = {
    ("task", "noise_std"), ("task", "train_size"), ("task", "valid_size"), ("optimizer", "clip_norm"),
    ("training", "epochs"), ("training", "max_steps"), ("cascade", "epochs"), ("evaluation", "max_length"),
    ("evaluation", "bayes_risk_samples"), ("regime", "gamma"), ("regime", "teacher_epochs"),
    ("professor", "lambda_free"), ("professor", "lambda_teacher"), ("schedule", "floor"),
}


def _merge(base: Dict, update: Dict, path: str, problems: List[str]) -> None:
    for key, value in update.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in base:
            problems.append(f"{where}: unknown key")
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                problems.append(f"{where}: expected a section")
            else:
                _merge(base[key], value, where, problems)
        else:
            base[key] = value


def _validate(data: Dict) -> List[str]:
    problems = []
    for (section, key), allowed in _CHOICES.items():
        if data[section][key] not in allowed:
            problems.append(f"{section}.{key}: '{data[section][key]}' is not one of {list(allowed)}")
    for group, check, label in ((_POSITIVE, lambda v: v > 0, "> 0"), (_NON_NEGATIVE, lambda v: v >= 0, ">= 0")):
        for section, key in sorted(group):
            value = data[section][key]
            if value is None:
                continue
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                problems.append(f"{section}.{key}: expected a number, got {value!r}")
            elif not check(value):
                problems.append(f"{section}.{key}: must be {label}, got {value}")
    if isinstance(data["model"]["encoder_dim"], int) and data["model"]["encoder_dim"] % 2:
        problems.append("model.encoder_dim: must be even (bidirectional encoder)")
    for path_key in ("train_file", "valid_file"):
        path = data["task"][path_key]
        if path is not None and not os.path.exists(path):
            problems.append(f"task.{path_key}: file not found: {path}")
    return problems


def _set_dotted(data: Dict, dotted: str, value: Any, problems: List[str]) -> None:
    section, _, key = dotted.partition(".")
    if section not in data or key not in data[section]:
        problems.append(f"{dotted}: unknown key")
        return
    data[section][key] = value


@dataclass
class RunConfig:
    """A fully resolved, validated configuration plus typed views of its sections."""

    data: Dict[str, Dict[str, Any]]

    @property
    def seed(self) -> int:
        return int(self.data["training"]["seed"])

    @property
    def epochs(self) -> int:
        return int(self.data["training"]["epochs"])

    @property
    def regime_name(self) -> str:
        return self.data["regime"]["name"]

    @property
    def continuous(self) -> bool:
        return self.data["task"]["kind"] == "expansion"

    @property
    def out_dir(self) -> str:
        if self.data["output"]["dir"]:
            return self.data["output"]["dir"]
        root = os.getenv(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)
        return os.path.join(root, f"{self.data['task']['kind']}-{self.regime_name}-seed{self.seed}")

    @property
    def gamma(self) -> float:
        value = self.data["regime"]["gamma"]
        if value is None:
            return DEFAULT_GAMMA["continuous" if self.continuous else "discrete"]
        return float(value)

    def task_spec(self, seed_offset: int = 0) -> TaskSpec:
        fields = {k: v for k, v in self.data["task"].items()
                  if k not in ("train_size", "valid_size", "train_file", "valid_file")}
        return TaskSpec(**{**fields, "seed": self.seed + seed_offset})

    def model_dims(self, src_vocab: int, tgt_vocab: int = 0, frame_dim: int = 0) -> ModelDims:
        dims = ModelDims(src_vocab=src_vocab, tgt_vocab=tgt_vocab, frame_dim=frame_dim, **self.data["model"])
        dims.validate()
        return dims

    def task_dims(self) -> ModelDims:
        """Model sizes for the configured synthetic task (ids 1..V, 0 reserved for EOS)."""
        vocab = self.data["task"]["vocab_size"] + 1
        if self.continuous:
            return self.model_dims(vocab, frame_dim=self.data["task"]["frame_dim"])
        return self.model_dims(vocab, tgt_vocab=vocab)

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(**self.data["optimizer"])

    def schedule_spec(self) -> ScheduleSpec:
        return ScheduleSpec(**self.data["schedule"])

    def cascade_config(self) -> CascadeConfig:
        section = {k: v for k, v in self.data["cascade"].items() if k != "epochs"}
        return CascadeConfig(seed=self.seed, **section)

    def beam_config(self) -> BeamConfig:
        evaluation = self.data["evaluation"]
        return BeamConfig(width=evaluation["beam_width"], max_length=evaluation["max_length"],
                          length_normalization=evaluation["length_normalization"])

    def regime_config(self, teacher=None, name: Optional[str] = None) -> RegimeConfig:
        """The configured regime (or `name`), with the teacher model attached for attention forcing."""
        name = name or self.regime_name
        section = self.data["regime"]
        mode = section["mode"]
        if name == "tf":
            return TeacherForcing()
        if name == "fr":
            return FreeRunning(mode=mode)
        if name == "ss_token":
            return ScheduledSamplingToken(schedule=self.schedule_spec(), mode=mode)
        if name == "ss_seq":
            return ScheduledSamplingSeq(schedule=self.schedule_spec(), mode=mode)
        if name == "af":
            return AttentionForcing(gamma=self.gamma, teacher=teacher, tied=section["tied"], mode=mode)
        if name == "maf":
            return ModifiedAttentionForcing(gamma=self.gamma, teacher=teacher, tied=section["tied"])
        if name == "pf":
            return ProfessorForcing(mode=mode, **self.data["professor"])
        raise ConfigError([f"regime.name: unknown regime '{name}'"])

    def needs_teacher(self, name: Optional[str] = None) -> bool:
        return (name or self.regime_name) in ("af", "maf") and not self.data["regime"]["tied"]

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return copy.deepcopy(self.data)

    def digest(self) -> str:
        """Digest of everything that shapes the trained model; output, evaluation and the step cap are excluded."""
        relevant = {k: copy.deepcopy(v) for k, v in self.data.items() if k not in ("output", "evaluation")}
        relevant["training"].pop("max_steps", None)
        return config_digest(relevant)

    def dump(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=False, default_flow_style=False)


def default_config() -> RunConfig:
    return RunConfig(data=copy.deepcopy(DEFAULT_CONFIG))


def load_config(config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Resolve a run configuration.

    Args:
        config_path: YAML file deep-merged over the defaults (None: defaults only)
        overrides: dotted keys ("training.seed") set after the file, e.g. from CLI flags

    Raises:
        ConfigError: every unknown key and invalid value, reported together
    """
    data = copy.deepcopy(DEFAULT_CONFIG)
    problems: List[str] = []

    if config_path:
        if not os.path.exists(config_path):
            raise ConfigError([f"config file not found: {config_path}"])
        with open(config_path, "r", encoding="utf-8") as f:
            try:
                loaded = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError([f"{config_path}: not valid YAML ({e})"]) from e
        if not isinstance(loaded, dict):
            raise ConfigError([f"{config_path}: top level must be a mapping of sections"])
        _merge(data, loaded, "", problems)

    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(data, dotted, value, problems)

    if not problems:
        problems.extend(_validate(data))
    if not problems:
        config = RunConfig(data=data)
        try:
            config.task_spec()
            config.task_dims()
            config.optimizer_config()
            config.schedule_spec()
            config.cascade_config()
            config.beam_config()
            config.regime_config()
        except ContractError as e:
            problems.append(str(e))
        except TypeError as e:
            problems.append(f"invalid field type: {e}")
    if problems:
        raise ConfigError(problems)

    logger.info(f"Configuration resolved ({config_path or 'defaults'}), digest {config.digest()[:12]}")
    return config
