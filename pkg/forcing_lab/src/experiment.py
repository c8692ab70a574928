"""Experiment runner: training orchestration, generation, evaluation, regime comparison, gradient checks"""

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .cascade import (
    DownstreamDims, DownstreamParams, ToyVocoder, attach_waveforms, generate_feature_corpus,
    pipeline_l1, train_downstream,
)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .decoding import (
    attention_forced_generate, beam_search_decode, greedy_decode, hypothesis_result, teacher_forced_generate,
)
from .exceptions import ConfigError, ContractError, DataError
from .metrics import (
    alignment_diagnostics, alignment_kl_to_gold, bayes_risk_estimate, bleu_corpus, padded_l1_error,
)
from .models import AlignedPair, BeamConfig, MetricRecord, ScheduleSpec
from .regimes import (
    AttentionForcing, DiscriminatorParams, ModifiedAttentionForcing, ProfessorForcing, ScheduledSamplingSeq,
    ScheduledSamplingToken, TeacherForcing, FreeRunning, build_objective, discriminator_objective,
    plan_professor,
)
from .seq2seq import ModelDims, ModelParams
from .tasks import generate, load_dataset, load_sources, save_dataset
from .training import Adam, train_loop
from .utils import derive_rng, log_duration

logger = logging.getLogger(__name__)

GENERATION_MODES = ("free", "teacher_forced", "attention_forced", "beam")
GRADCHECK_TOLERANCE = 1e-4


# ---------------------------------------------------------------------------
# Checkpoint <-> model
# ---------------------------------------------------------------------------

def model_checkpoint(params: ModelParams, step: int = 0, digest: str = "", model_id: str = "seq2seq",
                     optimizer: Optional[Adam] = None, disc: Optional[DiscriminatorParams] = None,
                     disc_optimizer: Optional[Adam] = None, metadata: Optional[Dict] = None) -> Checkpoint:
    arrays = {f"model/{n}": a.copy() for n, a in params.named_arrays().items()}
    meta = {"dims": params.dims.to_dict(), **(metadata or {})}
    if optimizer is not None:
        arrays.update(optimizer.state_arrays("opt"))
    if disc is not None:
        arrays.update({f"disc/{n}": a.copy() for n, a in disc.named_arrays().items()})
        meta["disc"] = {"input_dim": disc.input_dim, "hidden_dim": disc.hidden_dim}
    if disc_optimizer is not None:
        arrays.update(disc_optimizer.state_arrays("disc_opt"))
    return Checkpoint(model_id=model_id, arrays=arrays, step=step, config_digest=digest, metadata=meta)


def params_from_checkpoint(checkpoint: Checkpoint) -> ModelParams:
    if "dims" not in checkpoint.metadata:
        raise DataError(f"checkpoint '{checkpoint.model_id}' has no model dimensions")
    dims = ModelDims(**checkpoint.metadata["dims"])
    return ModelParams.from_arrays(dims, checkpoint.section("model"))


def disc_from_checkpoint(checkpoint: Checkpoint) -> Optional[DiscriminatorParams]:
    info = checkpoint.metadata.get("disc")
    if not info:
        return None
    tensors = {n: Tensor(a, requires_grad=True, name=n) for n, a in checkpoint.section("disc").items()}
    return DiscriminatorParams(input_dim=info["input_dim"], hidden_dim=info["hidden_dim"], tensors=tensors)


def load_model(path: str) -> ModelParams:
    return params_from_checkpoint(load_checkpoint(path))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _gold_rows(pair: AlignedPair, dims: ModelDims) -> Optional[np.ndarray]:
    """Gold alignment at decode-step resolution (every r-th frame row for reduced frame models)."""
    if pair.gold_alignment is None:
        return None
    gold = np.asarray(pair.gold_alignment)
    return gold[::dims.reduction_factor] if dims.continuous else gold


def evaluate_model(params: ModelParams, dataset: Sequence[AlignedPair], max_length: int = 50,
                   bleu_smoothing: bool = False, bayes_risk_samples: int = 0, bayes_risk_loss: str = "bleu",
                   seed: int = 0) -> Dict[str, float]:
    """
    Free-running metrics over a dataset.

    Discrete models report corpus BLEU (and a sampled Bayes risk when
    `bayes_risk_samples` > 0); frame models report zero-padded frame L1.
    Both report alignment entropy, monotonicity, KL to gold over the
    overlapping rows, and the truncation rate.
    """
    if not dataset:
        raise ContractError("cannot evaluate on an empty dataset", kind="evaluate")
    dims = params.dims
    results = [greedy_decode(pair.x, params, max_length=max_length) for pair in dataset]
    metrics: Dict[str, float] = {}

    if dims.continuous:
        metrics["l1"] = float(np.mean([padded_l1_error(r.output, pair.y) for r, pair in zip(results, dataset)]))
    else:
        metrics["bleu"] = bleu_corpus([r.output for r in results], [pair.y for pair in dataset], bleu_smoothing)
        if bayes_risk_samples > 0:
            risks = [bayes_risk_estimate(params, pair.x, pair.y, bayes_risk_samples, derive_rng(seed, 99, i),
                                         loss=bayes_risk_loss, max_length=max_length)
                     for i, pair in enumerate(dataset)]
            metrics["bayes_risk"] = float(np.mean(risks))

    entropies, monotonicity, kls = [], [], []
    for result, pair in zip(results, dataset):
        if result.alignment.shape[0] == 0:
            continue
        diagnostics = alignment_diagnostics(result.alignment)
        entropies.append(diagnostics.mean_entropy)
        monotonicity.append(diagnostics.monotonicity)
        gold = _gold_rows(pair, dims)
        if gold is not None:
            rows = min(gold.shape[0], result.alignment.shape[0])
            kls.append(alignment_kl_to_gold(result.alignment[:rows], gold[:rows]))
    if entropies:
        metrics["alignment_entropy"] = float(np.mean(entropies))
        metrics["monotonicity"] = float(np.mean(monotonicity))
    if kls:
        metrics["kl_to_gold"] = float(np.mean(kls))
    metrics["truncated_rate"] = float(np.mean([r.truncated for r in results]))
    return metrics


# ---------------------------------------------------------------------------
# Gradient-check suite
# ---------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    results: List[Tuple[str, float]] = field(default_factory=list)
    tolerance: float = GRADCHECK_TOLERANCE

    @property
    def worst(self) -> Dict[str, float]:
        """Max relative error per check name."""
        out: Dict[str, float] = {}
        for name, error in self.results:
            out[name] = max(out.get(name, 0.0), error)
        return out

    @property
    def failures(self) -> List[str]:
        return [name for name, error in self.worst.items() if not error < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> List[str]:
        return [f"{'FAIL' if not error < self.tolerance else 'ok  '} {name:<28} {error:.3e}"
                for name, error in self.worst.items()]


def _away_from(rng: np.random.Generator, shape, point: float = 0.0, gap: float = 0.3) -> np.ndarray:
    z = rng.normal(size=shape)
    return point + np.sign(z) * (gap + np.abs(z))


def primitive_cases(rng: np.random.Generator) -> Dict[str, Tuple[List[np.ndarray], Dict[str, Any]]]:
    """Random inputs per primitive, kept clear of kinks and domain edges."""
    n = rng.normal
    return {
        "add": ([n(size=(3, 4)), n(size=(4,))], {}),
        "sub": ([n(size=(3, 4)), n(size=(3, 4))], {}),
        "mul": ([n(size=(3, 4)), n(size=(3, 1))], {}),
        "matmul": ([n(size=(3, 4)), n(size=(4, 2))], {}),
        "concat": ([n(size=(2, 3)), n(size=(1, 3))], {"axis": 0}),
        "slice": ([n(size=(4, 5))], {"key": (slice(1, 3), slice(None))}),
        "reshape": ([n(size=(3, 4))], {"shape": (2, 6)}),
        "tanh": ([n(size=(3, 4))], {}),
        "sigmoid": ([n(size=(3, 4))], {}),
        "relu": ([_away_from(rng, (3, 4))], {}),
        "exp": ([0.5 * n(size=(3, 4))], {}),
        "log": ([rng.uniform(0.5, 2.0, size=(3, 4))], {}),
        "abs": ([_away_from(rng, (3, 4))], {}),
        "clamp_min": ([_away_from(rng, (3, 4), point=0.1)], {"floor": 0.1}),
        "sum": ([n(size=(3, 4))], {"axis": 1}),
        "mean": ([n(size=(3, 4))], {"axis": 0}),
        "softmax": ([n(size=(3, 4))], {}),
        "log_softmax": ([n(size=(3, 4))], {}),
        "conv1d": ([n(size=(6, 2)), n(size=(3, 2, 5))], {}),
        "embedding_lookup": ([n(size=(5, 3))], {"indices": [1, 3, 1]}),
    }


def primitive_objective(kind: str, attrs: Dict[str, Any], weights: np.ndarray) -> Callable[..., Tensor]:
    """Scalar probe: weighted sum of the primitive's output."""
    def f(*inputs: Tensor) -> Tensor:
        return ad.sum_(ad.primitive_forward(kind, inputs, **attrs) * weights)
    return f


def toy_batches() -> Dict[str, List[AlignedPair]]:
    frames_rng = derive_rng(5, 5)
    return {
        "discrete": [AlignedPair(x=[1, 2, 3], y=[2, 1]), AlignedPair(x=[3, 1], y=[1, 3, 2])],
        "continuous": [AlignedPair(x=[1, 2, 3], y=frames_rng.normal(size=(3, 2))),
                       AlignedPair(x=[2, 1], y=frames_rng.normal(size=(4, 2)))],
    }


def toy_dims(continuous: bool = False) -> ModelDims:
    common = dict(src_vocab=4, embed_dim=3, hidden_dim=4, encoder_dim=4, attention_dim=3,
                  location_filters=2, location_kernel=3, max_source_len=4)
    if continuous:
        return ModelDims(frame_dim=2, reduction_factor=2, postnet=True, **common)
    return ModelDims(tgt_vocab=4, **common)


def regime_cases(seed: int = 0) -> Dict[str, Tuple[Callable[..., Tensor], List[Tensor]]]:
    """Every regime loss on a 2-example toy batch, as (objective, inputs)."""
    batches = toy_batches()
    discrete = batches["discrete"]
    params = ModelParams.initialize(toy_dims(), seed)
    teacher = ModelParams.initialize(toy_dims(), seed + 1)
    schedule = ScheduleSpec(total_steps=10)

    def rng(stream: int) -> np.random.Generator:
        return derive_rng(seed, 3, stream)

    regimes = {
        "tf": TeacherForcing(),
        "fr": FreeRunning(),
        "ss_token": ScheduledSamplingToken(schedule=schedule, mode="sample"),
        "ss_seq": ScheduledSamplingSeq(schedule=schedule),
        "af": AttentionForcing(gamma=1.0, teacher=teacher),
        "af_tied": AttentionForcing(gamma=1.0, tied=True),
        "maf": ModifiedAttentionForcing(gamma=1.0, teacher=teacher),
    }
    cases = {}
    for i, (name, regime) in enumerate(regimes.items()):
        objective = build_objective(regime, discrete, params, step_index=5, rng=rng(i), coin_rng=rng(100 + i))
        cases[name] = (objective, objective.inputs)

    professor = ProfessorForcing()
    disc = DiscriminatorParams.for_model(params, hidden_dim=3, seed=seed)
    generator = build_objective(professor, discrete, params, rng=rng(50), disc=disc)
    cases["pf_generator"] = (generator, generator.inputs)
    disc_objective = discriminator_objective(discrete, params, disc, plan_professor(discrete, params, professor))
    cases["pf_discriminator"] = (disc_objective, disc_objective.inputs)

    frames = batches["continuous"]
    frame_params = ModelParams.initialize(toy_dims(continuous=True), seed)
    frame_teacher = ModelParams.initialize(toy_dims(continuous=True), seed + 1)
    for name, regime in (("tf_frames", TeacherForcing()),
                         ("af_frames", AttentionForcing(gamma=50.0, teacher=frame_teacher))):
        objective = build_objective(regime, frames, frame_params)
        cases[name] = (objective, objective.inputs)
    return cases


def run_gradcheck(seeds: int = 3, h: float = 1e-5, include_regimes: bool = True) -> GradcheckReport:
    report = GradcheckReport()
    for seed in range(seeds):
        rng = derive_rng(seed, 21)
        for kind, (arrays, attrs) in primitive_cases(rng).items():
            inputs = [Tensor(a, requires_grad=True) for a in arrays]
            with ad.no_grad():
                out_shape = ad.primitive_forward(kind, inputs, **attrs).shape
            objective = primitive_objective(kind, attrs, rng.normal(size=out_shape))
            report.results.append((kind, grad_check(objective, inputs, h)))
        if include_regimes:
            for name, (objective, inputs) in regime_cases(seed).items():
                report.results.append((f"loss:{name}", grad_check(objective, inputs, h)))
    return report


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------

@dataclass
class TrainSummary:
    checkpoint_path: str
    metrics_path: str
    step: int
    final_loss: Optional[float]
    teacher_path: Optional[str] = None


class MetricsWriter:
    """JSONL sink, one MetricRecord per line."""

    def __init__(self, path: str, append: bool = False):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.path = path
        self._file = open(path, "a" if append else "w", encoding="utf-8")

    def __call__(self, record: MetricRecord) -> None:
        self._file.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()


class ExperimentRunner:

    def __init__(self, config: RunConfig):
        """
        Args:
            config: resolved run configuration
        """
        self.config = config
        logger.info(f"Experiment runner initialized (task {config.data['task']['kind']}, "
                    f"regime {config.regime_name}, seed {config.seed})")

    # -- paths ---------------------------------------------------------------

    @property
    def out_dir(self) -> str:
        return self.config.out_dir

    def _path(self, key: str) -> str:
        return os.path.join(self.out_dir, self.config.data["output"][key])

    # -- data ----------------------------------------------------------------

    def load_splits(self) -> Tuple[List[AlignedPair], List[AlignedPair]]:
        """Train/valid examples from the configured files, or generated from the task spec."""
        task = self.config.data["task"]
        if task["train_file"]:
            train = load_dataset(task["train_file"])
            valid = load_dataset(task["valid_file"]) if task["valid_file"] else []
            return train, valid
        # One generator call so both splits share expansion durations and prototypes
        pairs = generate(self.config.task_spec(), task["train_size"] + task["valid_size"])
        return pairs[:task["train_size"]], pairs[task["train_size"]:]

    # -- commands ------------------------------------------------------------

    @log_duration("cmd_make_data")
    def cmd_make_data(self) -> Dict[str, str]:
        """Write the generated train/valid splits (with waveforms for frame tasks)."""
        train, valid = self.load_splits()
        if self.config.continuous:
            vocoder = ToyVocoder(self.config.data["task"]["frame_dim"],
                                 self.config.data["cascade"]["samples_per_frame"], self.config.seed)
            train, valid = attach_waveforms(train, vocoder), attach_waveforms(valid, vocoder)
        paths = {
            "train": save_dataset(train, os.path.join(self.out_dir, "train.jsonl")),
            "valid": save_dataset(valid, os.path.join(self.out_dir, "valid.jsonl")),
        }
        return paths

    def _train_teacher(self, train: Sequence[AlignedPair], dims: ModelDims) -> str:
        epochs = self.config.data["regime"]["teacher_epochs"]
        epochs = self.config.epochs if epochs is None else int(epochs)
        teacher = ModelParams.initialize(dims, self.config.seed)
        path = os.path.join(self.out_dir, "teacher.ckpt")
        with MetricsWriter(os.path.join(self.out_dir, "teacher_metrics.jsonl")) as sink:
            result = train_loop(train, teacher, TeacherForcing(), self.config.optimizer_config(), epochs,
                                self.config.seed, metrics_sink=sink, snapshot_dir=self.out_dir,
                                model_id="teacher")
        save_checkpoint(model_checkpoint(teacher, result.step, self.config.digest(), "seq2seq-teacher"), path)
        logger.info(f"Teacher phase finished after {result.step} steps: {path}")
        return path

    @log_duration("cmd_train")
    def cmd_train(self, train_teacher: bool = False, teacher_checkpoint: Optional[str] = None,
                  resume: bool = False) -> TrainSummary:
        """
        Train the configured regime; attention forcing first obtains a teacher.

        Raises:
            ContractError: attention forcing without a teacher checkpoint and
                without `train_teacher`.
            ConfigError: resuming a checkpoint written under another configuration.
        """
        config = self.config
        os.makedirs(self.out_dir, exist_ok=True)
        train, _ = self.load_splits()
        dims = config.task_dims()
        checkpoint_path = self._path("checkpoint_file")
        metrics_path = self._path("metrics_file")

        previous = None
        if resume:
            previous = load_checkpoint(checkpoint_path)
            if previous.config_digest != config.digest():
                raise ConfigError([f"checkpoint {checkpoint_path} was written under a different configuration "
                                   f"(digest {previous.config_digest[:12]} != {config.digest()[:12]}); "
                                   f"refusing to resume"])
            teacher_checkpoint = teacher_checkpoint or previous.metadata.get("teacher_checkpoint")

        teacher = None
        if config.needs_teacher():
            if teacher_checkpoint is None:
                if not train_teacher:
                    raise ContractError(f"regime '{config.regime_name}' needs a teacher: pass "
                                        f"--teacher-checkpoint or --train-teacher", kind="cmd_train")
                teacher_checkpoint = self._train_teacher(train, dims)
            teacher = load_model(teacher_checkpoint)

        regime = config.regime_config(teacher=teacher)
        optimizer_config = config.optimizer_config()
        if previous is not None:
            params = params_from_checkpoint(previous)
            optimizer = Adam.for_tensors(optimizer_config, params.tensors)
            optimizer.load_state_arrays(previous.section("opt"))
            disc = disc_from_checkpoint(previous)
            disc_optimizer = None
            if disc is not None:
                disc_optimizer = Adam.for_tensors(optimizer_config, disc.tensors)
                disc_optimizer.load_state_arrays(previous.section("disc_opt"))
            start_step = previous.step
            logger.info(f"Resuming from {checkpoint_path} at step {start_step}")
        else:
            params = ModelParams.initialize(dims, config.seed)
            optimizer = disc = disc_optimizer = None
            start_step = 0
            if isinstance(regime, ProfessorForcing):
                disc = DiscriminatorParams.for_model(params, regime.disc_hidden, config.seed)

        with MetricsWriter(metrics_path, append=resume) as sink:
            result = train_loop(train, params, regime, optimizer_config, config.epochs, config.seed,
                                disc=disc, optimizer=optimizer, disc_optimizer=disc_optimizer,
                                start_step=start_step, max_steps=config.data["training"]["max_steps"],
                                metrics_sink=sink, snapshot_dir=self.out_dir,
                                model_id=f"seq2seq-{config.regime_name}")

        metadata = {"regime": config.regime_name, "teacher_checkpoint": teacher_checkpoint}
        save_checkpoint(model_checkpoint(params, result.step, config.digest(), f"seq2seq-{config.regime_name}",
                                         result.optimizer, result.disc, result.disc_optimizer, metadata),
                        checkpoint_path)
        losses = [r.value for r in result.log if r.name == "loss"]
        return TrainSummary(checkpoint_path=checkpoint_path, metrics_path=metrics_path, step=result.step,
                            final_loss=losses[-1] if losses else None, teacher_path=teacher_checkpoint)

    @log_duration("cmd_generate")
    def cmd_generate(self, checkpoint: str, input_file: str, mode: str = "free", output_file: Optional[str] = None,
                     beam_width: Optional[int] = None, teacher_checkpoint: Optional[str] = None) -> str:
        """
        Decode every record of `input_file` and write outputs plus alignments as JSONL.

        free / beam need only `src`; teacher_forced needs `tgt`;
        attention_forced takes the record's `align` when present, otherwise
        the teacher-forced alignment of the teacher (or of the model itself).
        """
        if mode not in GENERATION_MODES:
            raise ContractError(f"unknown generation mode '{mode}' (choose from {GENERATION_MODES})",
                                kind="cmd_generate")
        params = load_model(checkpoint)
        max_length = self.config.data["evaluation"]["max_length"]
        output_file = output_file or os.path.join(self.out_dir, f"generated-{mode}.jsonl")
        os.makedirs(os.path.dirname(os.path.abspath(output_file)), exist_ok=True)

        records = []
        if mode in ("free", "beam"):
            beam_config = self.config.beam_config()
            if beam_width is not None:
                beam_config = BeamConfig(width=beam_width, max_length=beam_config.max_length,
                                         length_normalization=beam_config.length_normalization)
            for src in load_sources(input_file):
                if mode == "free":
                    record = greedy_decode(src, params, max_length=max_length).to_dict()
                else:
                    hypotheses = beam_search_decode(src, params, beam_config)
                    record = hypothesis_result(hypotheses[0], len(src)).to_dict()
                    record["beam"] = [{"out": h.tokens, "log_prob": h.log_prob, "finished": h.finished}
                                      for h in hypotheses]
                records.append({"src": src, **record})
        else:
            try:
                pairs = load_dataset(input_file)
            except DataError as e:
                raise ContractError(f"mode '{mode}' needs reference targets in every record: {e}",
                                    kind="cmd_generate") from e
            reference_model = load_model(teacher_checkpoint) if teacher_checkpoint else params
            for pair in pairs:
                if mode == "teacher_forced":
                    result = teacher_forced_generate(pair.x, pair, params)
                else:
                    if pair.gold_alignment is not None:
                        alpha_ref = _gold_rows(pair, params.dims)
                    else:
                        alpha_ref = teacher_forced_generate(pair.x, pair, reference_model).alignment
                    target_length = pair.target_length if params.dims.continuous else None
                    result = attention_forced_generate(pair.x, alpha_ref, params, target_length=target_length)
                records.append({"src": pair.x, **result.to_dict()})

        with open(output_file, "w", encoding="utf-8") as f:
            for record in records:
                f.write(json.dumps(record) + "\n")
        logger.info(f"Wrote {len(records)} {mode} outputs to {output_file}")
        return output_file

    @log_duration("cmd_evaluate")
    def cmd_evaluate(self, checkpoint: str, input_file: Optional[str] = None,
                     output_file: Optional[str] = None) -> Dict[str, float]:
        """Free-running metrics of a checkpoint, appended to eval.jsonl as MetricRecords."""
        params = load_model(checkpoint)
        dataset = load_dataset(input_file) if input_file else self.load_splits()[1]
        evaluation = self.config.data["evaluation"]
        metrics = evaluate_model(params, dataset, evaluation["max_length"], evaluation["bleu_smoothing"],
                                 evaluation["bayes_risk_samples"], evaluation["bayes_risk_loss"], self.config.seed)
        step = load_checkpoint(checkpoint).step
        output_file = output_file or os.path.join(self.out_dir, "eval.jsonl")
        with MetricsWriter(output_file, append=True) as sink:
            for name, value in metrics.items():
                sink(MetricRecord(name=name, value=value, step=step, split="valid"))
        logger.info("Evaluation: " + ", ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
        return metrics

    @log_duration("cmd_cascade")
    def cmd_cascade(self, upstream_checkpoint: str, teacher_checkpoint: Optional[str] = None,
                    mode: Optional[str] = None) -> Dict[str, float]:
        """Train the upsampler on a guided feature corpus and report the free-running pipeline L1."""
        if not self.config.continuous:
            raise ContractError("the cascade needs a frame (expansion) task", kind="cmd_cascade")
        cascade = self.config.cascade_config()
        mode = mode or cascade.upstream_mode
        upstream = load_model(upstream_checkpoint)
        teacher = load_model(teacher_checkpoint) if teacher_checkpoint else None
        train, valid = self.load_splits()
        vocoder = ToyVocoder(upstream.dims.frame_dim, cascade.samples_per_frame, self.config.seed)
        train, valid = attach_waveforms(train, vocoder), attach_waveforms(valid, vocoder)

        corpus = generate_feature_corpus(train, upstream, mode, teacher)
        save_dataset(corpus, os.path.join(self.out_dir, f"corpus-{mode}.jsonl"))
        phi = DownstreamParams.initialize(
            DownstreamDims(upstream.dims.frame_dim, cascade.samples_per_frame, cascade.hidden_dim), self.config.seed)
        with MetricsWriter(os.path.join(self.out_dir, "cascade_metrics.jsonl")) as sink:
            result = train_downstream(corpus, phi, self.config.optimizer_config(),
                                      self.config.data["cascade"]["epochs"], self.config.seed, metrics_sink=sink,
                                      snapshot_dir=self.out_dir)
            metrics = {}
            if valid:
                metrics["pipeline_l1"] = pipeline_l1(valid, upstream, phi, self.config.data["evaluation"]["max_length"])
            losses = [r.value for r in result.log if r.name == "loss"]
            if losses:
                metrics["downstream_train_l1"] = losses[-1]
            for name, value in metrics.items():
                sink(MetricRecord(name=name, value=value, step=result.step, split="valid"))

        arrays = {f"downstream/{n}": a.copy() for n, a in phi.named_arrays().items()}
        save_checkpoint(Checkpoint(model_id=f"downstream-{mode}", arrays=arrays, step=result.step,
                                   config_digest=self.config.digest(),
                                   metadata={"downstream_dims": phi.dims.to_dict(), "upstream_mode": mode}),
                        os.path.join(self.out_dir, "downstream.ckpt"))
        return metrics

    def _cell_config(self, regime: str, seed: int, out_dir: str) -> RunConfig:
        data = self.config.to_dict()
        data["regime"]["name"] = regime
        data["training"]["seed"] = int(seed)
        data["output"]["dir"] = out_dir
        return RunConfig(data=data)

    @log_duration("cmd_compare_regimes")
    def cmd_compare_regimes(self, regimes: Sequence[str], seeds: Sequence[int], workers: int = 1) -> str:
        """
        Train and evaluate every (regime, seed) cell; write comparison.csv.

        Attention-forcing cells share one teacher per seed, trained first.
        Rows: one per cell, then median and mean rows per regime when more
        than one seed was run.
        """
        if not regimes or not seeds:
            raise ContractError("need at least one regime and one seed", kind="cmd_compare_regimes")
        os.makedirs(self.out_dir, exist_ok=True)

        teachers: Dict[int, Optional[str]] = {}
        for seed in seeds:
            teachers[seed] = None
            if any(self.config.needs_teacher(regime) for regime in regimes):
                teacher_dir = os.path.join(self.out_dir, f"teacher-seed{seed}")
                runner = ExperimentRunner(self._cell_config("tf", seed, teacher_dir))
                os.makedirs(runner.out_dir, exist_ok=True)
                train, _ = runner.load_splits()
                teachers[seed] = runner._train_teacher(train, runner.config.task_dims())

        payloads = [(self._cell_config(regime, seed, os.path.join(self.out_dir, f"{regime}-seed{seed}")).data,
                     teachers[seed]) for regime in regimes for seed in seeds]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(_run_cell, payloads))
        else:
            rows = [_run_cell(payload) for payload in payloads]

        metric_names = sorted({k for row in rows for k in row if k not in ("regime", "seed")})
        summary = []
        if len(seeds) > 1:
            for regime in regimes:
                group = [row for row in rows if row["regime"] == regime]
                for label, reducer in (("median", np.median), ("mean", np.mean)):
                    entry = {"regime": regime, "seed": label}
                    for name in metric_names:
                        values = [row[name] for row in group if name in row]
                        if values:
                            entry[name] = float(reducer(values))
                    summary.append(entry)

        path = os.path.join(self.out_dir, "comparison.csv")
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=["regime", "seed", *metric_names])
            writer.writeheader()
            for row in rows + summary:
                writer.writerow(row)
        logger.info(f"Comparison of {len(regimes)} regimes x {len(seeds)} seeds written to {path}")
        return path

    @log_duration("cmd_gradcheck")
    def cmd_gradcheck(self, seeds: int = 3) -> GradcheckReport:
        report = run_gradcheck(seeds=seeds)
        for line in report.lines():
            logger.info(line)
        if not report.passed:
            logger.error(f"Gradient check failed for: {', '.join(report.failures)}")
        return report


def _run_cell(payload) -> Dict[str, Any]:
    """One comparison cell in its own directory; top-level so process pools can pickle it."""
    data, teacher_path = payload
    config = RunConfig(data=data)
    runner = ExperimentRunner(config)
    summary = runner.cmd_train(teacher_checkpoint=teacher_path if config.needs_teacher() else None)
    _, valid = runner.load_splits()
    metrics = {}
    if valid:
        evaluation = config.data["evaluation"]
        metrics = evaluate_model(load_model(summary.checkpoint_path), valid, evaluation["max_length"],
                                 evaluation["bleu_smoothing"], evaluation["bayes_risk_samples"],
                                 evaluation["bayes_risk_loss"], config.seed)
    metrics["final_train_loss"] = summary.final_loss if summary.final_loss is not None else float("nan")
    return {"regime": config.regime_name, "seed": config.seed, **metrics}
