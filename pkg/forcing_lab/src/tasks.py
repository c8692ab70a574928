"""Synthetic aligned tasks (copy, expansion, reorder) and the JSONL dataset format"""

import json
import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ContractError, DataError
from .models import TASK_KINDS, AlignedPair, TaskSpec
from .utils import derive_rng, validate_simplex_rows

logger = logging.getLogger(__name__)

TARGET_FORMATS = ("auto", "tokens", "frames")


def one_hot_rows(columns: Sequence[int], width: int) -> np.ndarray:
    """Gold alignment with row t one-hot at columns[t]."""
    matrix = np.zeros((len(columns), width))
    matrix[np.arange(len(columns)), list(columns)] = 1.0
    return matrix


def _task_rng(spec: TaskSpec) -> np.random.Generator:
    return derive_rng(spec.seed, TASK_KINDS.index(spec.kind))


def _sample_source(spec: TaskSpec, rng: np.random.Generator) -> List[int]:
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    return [int(t) for t in rng.integers(1, spec.vocab_size + 1, size=length)]


def gen_copy(spec: TaskSpec, n: int) -> List[AlignedPair]:
    """y = x with the identity alignment."""
    rng = _task_rng(spec)
    pairs = []
    for _ in range(n):
        x = _sample_source(spec, rng)
        pairs.append(AlignedPair(x=x, y=list(x), gold_alignment=np.eye(len(x))))
    return pairs


# ---------------------------------------------------------------------------
# Expansion
# ---------------------------------------------------------------------------

def expansion_tables(spec: TaskSpec, rng: np.random.Generator) -> Tuple[Dict[int, int], np.ndarray]:
    """Per-symbol durations and frame prototypes (row 0 unused)."""
    if spec.durations:
        durations = {int(k): int(v) for k, v in spec.durations.items()}
        missing = [s for s in range(1, spec.vocab_size + 1) if s not in durations]
        if missing:
            raise ContractError(f"duration map is missing symbols {missing}")
    else:
        drawn = rng.integers(spec.min_duration, spec.max_duration + 1, size=spec.vocab_size)
        durations = {s + 1: int(d) for s, d in enumerate(drawn)}
    prototypes = rng.normal(size=(spec.vocab_size + 1, spec.frame_dim))
    return durations, prototypes


def expand_example(x: Sequence[int], durations: Dict[int, int], prototypes: np.ndarray,
                   noise_std: float, rng: np.random.Generator) -> AlignedPair:
    """Repeat each symbol's prototype d(x_l) times, add noise, record which symbol each frame came from."""
    columns = [l for l, symbol in enumerate(x) for _ in range(durations[int(symbol)])]
    frames = prototypes[[int(x[l]) for l in columns]]
    if noise_std > 0:
        frames = frames + noise_std * rng.normal(size=frames.shape)
    return AlignedPair(x=[int(t) for t in x], y=np.array(frames, dtype=np.float64),
                       gold_alignment=one_hot_rows(columns, len(x)))


def gen_expansion(spec: TaskSpec, n: int) -> List[AlignedPair]:
    rng = _task_rng(spec)
    durations, prototypes = expansion_tables(spec, rng)
    return [expand_example(_sample_source(spec, rng), durations, prototypes, spec.noise_std, rng)
            for _ in range(n)]


# ---------------------------------------------------------------------------
# Reorder
# ---------------------------------------------------------------------------

def reorder_permutation(rule: str, length: int) -> List[int]:
    """Source index read at each target position."""
    if rule == "identity":
        return list(range(length))
    if rule == "reverse":
        return list(range(length - 1, -1, -1))
    if rule == "pair_swap":
        order = []
        for start in range(0, length - 1, 2):
            order.extend([start + 1, start])
        if length % 2:
            order.append(length - 1)
        return order
    raise ContractError(f"unknown reorder rule '{rule}'")


def gen_reorder(spec: TaskSpec, n: int) -> List[AlignedPair]:
    """
    Apply the reorder rule; with `ambiguous` set, a fair coin picks the
    alternative rule per example. The applied rule is kept in meta["order"].
    """
    rng = _task_rng(spec)
    pairs = []
    for _ in range(n):
        x = _sample_source(spec, rng)
        rule = spec.reorder_rule
        if spec.ambiguous and rng.random() < 0.5:
            rule = spec.alternative_rule
        permutation = reorder_permutation(rule, len(x))
        pairs.append(AlignedPair(x=x, y=[x[i] for i in permutation],
                                 gold_alignment=one_hot_rows(permutation, len(x)),
                                 meta={"order": rule}))
    return pairs


_GENERATORS = {"copy": gen_copy, "expansion": gen_expansion, "reorder": gen_reorder}


def generate(spec: TaskSpec, n: int) -> List[AlignedPair]:
    if n < 0:
        raise ContractError("example count must be >= 0")
    pairs = _GENERATORS[spec.kind](spec, n)
    logger.info(f"Generated {len(pairs)} {spec.kind} examples (seed {spec.seed})")
    return pairs


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------

def _parse_record(record, target: str) -> Tuple[Optional[AlignedPair], Optional[str]]:
    if not isinstance(record, dict):
        return None, "record is not an object"
    for key in ("src", "tgt"):
        if key not in record:
            return None, f"missing field '{key}'"
    src, tgt = record["src"], record["tgt"]
    if not isinstance(src, list) or not src or not all(isinstance(t, int) for t in src):
        return None, "'src' must be a non-empty array of integers"
    if not isinstance(tgt, list) or not tgt:
        return None, "'tgt' must be a non-empty array"

    is_frames = isinstance(tgt[0], list)
    if target == "tokens" and is_frames or target == "frames" and not is_frames:
        return None, f"'tgt' is not in {target} format"
    if is_frames:
        try:
            y = np.array(tgt, dtype=np.float64)
        except (TypeError, ValueError):
            return None, "'tgt' frames are not numeric"
        if y.ndim != 2:
            return None, "'tgt' frames have unequal lengths"
        if not np.all(np.isfinite(y)):
            return None, "'tgt' frames contain non-finite values"
    else:
        if not all(isinstance(t, int) for t in tgt):
            return None, "'tgt' tokens must be integers"
        y = list(tgt)

    gold = None
    if record.get("align") is not None:
        try:
            gold = np.array(record["align"], dtype=np.float64)
        except (TypeError, ValueError):
            return None, "'align' is not numeric"
        if gold.ndim != 2 or gold.shape != (len(y), len(src)):
            return None, f"'align' must be {len(y)} x {len(src)}, got {gold.shape}"
        if not validate_simplex_rows(gold):
            return None, "'align' rows are not on the probability simplex"

    wave = None
    if record.get("wave") is not None:
        wave = np.array(record["wave"], dtype=np.float64)
        if wave.ndim != 1 or wave.shape[0] % len(y) != 0:
            return None, f"'wave' length {wave.shape[0]} is not a multiple of the target length {len(y)}"

    meta = record.get("meta") or {}
    return AlignedPair(x=list(src), y=y, gold_alignment=gold, wave=wave, meta=meta), None


def load_dataset(path: str, target: str = "auto") -> List[AlignedPair]:
    """
    Read a newline-delimited dataset file.

    Args:
        path: UTF-8 file with one record per line (`src`, `tgt`, optional `align`, `wave`)
        target: "tokens", "frames" or "auto" (whatever the first record holds)

    Raises:
        DataError: malformed records, listing every offending line number
    """
    if target not in TARGET_FORMATS:
        raise ContractError(f"unknown target format '{target}'")
    if not os.path.exists(path):
        raise DataError(f"dataset not found: {path}")

    pairs: List[AlignedPair] = []
    problems: List[Tuple[int, str]] = []
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                problems.append((number, f"invalid JSON ({e.msg})"))
                continue
            pair, problem = _parse_record(record, target)
            if problem:
                problems.append((number, problem))
                continue
            if target == "auto" and pairs and pair.is_continuous != pairs[0].is_continuous:
                problems.append((number, "mixes token and frame targets"))
                continue
            pairs.append(pair)

    if problems:
        for number, problem in problems[:10]:
            logger.warning(f"{path}:{number}: {problem}")
        raise DataError(f"{len(problems)} malformed record(s) in {path}: {problems[0][1]}",
                        lines=[number for number, _ in problems])
    logger.info(f"Loaded {len(pairs)} examples from {path}")
    return pairs


def load_sources(path: str) -> List[List[int]]:
    """Only the `src` field of each record (inputs for free-running generation)."""
    if not os.path.exists(path):
        raise DataError(f"input file not found: {path}")
    sources: List[List[int]] = []
    bad: List[int] = []
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                src = json.loads(line).get("src")
            except (json.JSONDecodeError, AttributeError):
                bad.append(number)
                continue
            if not isinstance(src, list) or not src or not all(isinstance(t, int) for t in src):
                bad.append(number)
                continue
            sources.append(src)
    if bad:
        raise DataError(f"records without a valid 'src' array in {path}", lines=bad)
    return sources


def save_dataset(pairs: Sequence[AlignedPair], path: str) -> str:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for pair in pairs:
            record = pair.to_dict()
            if pair.meta:
                record["meta"] = pair.meta
            f.write(json.dumps(record) + "\n")
    logger.info(f"Saved {len(pairs)} examples to {path}")
    return path
