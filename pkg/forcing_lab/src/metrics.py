"""Evaluation metrics: BLEU, frame L1, alignment diagnostics and a sampled Bayes risk"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from sacrebleu.metrics import BLEU

from .decoding import sample_decode
from .exceptions import ContractError
from .utils import validate_simplex_rows

logger = logging.getLogger(__name__)

KL_FLOOR = 1e-12


def _as_text(tokens: Sequence[int]) -> str:
    return " ".join(str(int(t)) for t in tokens)


def bleu_corpus(hypotheses: Sequence[Sequence[int]], references: Sequence[Sequence[int]],
                smoothing: bool = False) -> float:
    """
    Corpus 4-gram BLEU with equal weights and brevity penalty, in [0, 1].

    Counts are pooled over the corpus. No smoothing unless `smoothing`
    (add-one), so a corpus without any matching 4-gram scores 0.
    """
    if not hypotheses:
        raise ContractError("BLEU of an empty corpus", kind="bleu_corpus")
    if len(hypotheses) != len(references):
        raise ContractError(f"{len(hypotheses)} hypotheses vs {len(references)} references", kind="bleu_corpus")
    scorer = BLEU(tokenize="none", smooth_method="add-k" if smoothing else "none", effective_order=False)
    result = scorer.corpus_score([_as_text(h) for h in hypotheses], [[_as_text(r) for r in references]])
    return result.score / 100.0


def sentence_bleu_loss(reference: Sequence[int], hypothesis: Sequence[int]) -> float:
    """1 - smoothed sentence BLEU."""
    scorer = BLEU(tokenize="none", smooth_method="exp", effective_order=True)
    return 1.0 - scorer.sentence_score(_as_text(hypothesis), [_as_text(reference)]).score / 100.0


def edit_distance(reference: Sequence[int], hypothesis: Sequence[int]) -> float:
    """Levenshtein distance over tokens."""
    previous = np.arange(len(hypothesis) + 1)
    for i, ref_token in enumerate(reference, 1):
        current = np.empty_like(previous)
        current[0] = i
        for j, hyp_token in enumerate(hypothesis, 1):
            current[j] = min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (ref_token != hyp_token))
        previous = current
    return float(previous[-1])


RISK_LOSSES: Dict[str, Callable[[Sequence[int], Sequence[int]], float]] = {
    "bleu": sentence_bleu_loss,
    "edit": edit_distance,
}


def l1_frame_error(y_hat: np.ndarray, y_ref: np.ndarray) -> float:
    """Mean over frames of the L1 distance between frame vectors."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y_ref = np.asarray(y_ref, dtype=np.float64)
    if y_hat.shape != y_ref.shape or y_hat.ndim != 2:
        raise ContractError("frame matrices differ in shape", kind="l1_frame_error",
                            shapes=[y_hat.shape, y_ref.shape])
    if y_hat.shape[0] == 0:
        raise ContractError("no frames to compare", kind="l1_frame_error")
    return float(np.mean(np.sum(np.abs(y_hat - y_ref), axis=1)))


def padded_l1_error(y_hat: np.ndarray, y_ref: np.ndarray) -> float:
    """L1 over the longer length, zero-padding the shorter sequence (lengths may differ)."""
    y_hat = np.atleast_2d(np.asarray(y_hat, dtype=np.float64))
    y_ref = np.atleast_2d(np.asarray(y_ref, dtype=np.float64))
    if y_hat.shape[1:] != y_ref.shape[1:]:
        raise ContractError("frame dimensions differ", kind="padded_l1_error", shapes=[y_hat.shape, y_ref.shape])
    length = max(y_hat.shape[0], y_ref.shape[0])
    if length == 0:
        return 0.0
    a = np.zeros((length,) + y_hat.shape[1:])
    b = np.zeros((length,) + y_ref.shape[1:])
    a[:y_hat.shape[0]] = y_hat
    b[:y_ref.shape[0]] = y_ref
    return float(np.mean(np.sum(np.abs(a - b).reshape(length, -1), axis=1)))


@dataclass
class AlignmentDiagnostics:
    mean_entropy: float
    monotonicity: float
    coverage: np.ndarray

    def to_dict(self) -> Dict:
        return {"mean_entropy": self.mean_entropy, "monotonicity": self.monotonicity,
                "coverage": self.coverage.tolist()}


def _check_alignment(alpha, kind: str) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 2 or alpha.shape[0] == 0:
        raise ContractError("alignment must be a non-empty T x L matrix", kind=kind, shapes=[alpha.shape])
    if not validate_simplex_rows(alpha):
        raise ContractError("alignment rows are not on the probability simplex", kind=kind)
    return alpha


def alignment_diagnostics(alpha: np.ndarray) -> AlignmentDiagnostics:
    """Entropy (nats) per row, share of non-decreasing argmax steps, and column sums."""
    alpha = _check_alignment(alpha, "alignment_diagnostics")
    logs = np.log(np.where(alpha > 0, alpha, 1.0))
    entropy = -np.sum(alpha * logs, axis=1)
    peaks = np.argmax(alpha, axis=1)
    monotonicity = float(np.mean(np.diff(peaks) >= 0)) if len(peaks) > 1 else 1.0
    return AlignmentDiagnostics(mean_entropy=float(np.mean(entropy)), monotonicity=monotonicity,
                                coverage=alpha.sum(axis=0))


def alignment_kl_to_gold(alpha: np.ndarray, gold: np.ndarray) -> float:
    """Mean per-row KL(gold || alpha), both sides clamped at 1e-12."""
    alpha = _check_alignment(alpha, "alignment_kl_to_gold")
    gold = _check_alignment(gold, "alignment_kl_to_gold")
    if alpha.shape != gold.shape:
        raise ContractError("alignment and gold differ in shape", kind="alignment_kl_to_gold",
                            shapes=[alpha.shape, gold.shape])
    p = np.maximum(gold, KL_FLOOR)
    q = np.maximum(alpha, KL_FLOOR)
    return float(np.mean(np.sum(gold * (np.log(p) - np.log(q)), axis=1)))


def bayes_risk_losses(params, x: Sequence[int], y_ref: Sequence[int], samples: int,
                      rng: np.random.Generator,
                      loss: Union[str, Callable[[Sequence[int], Sequence[int]], float]] = "bleu",
                      max_length: Optional[int] = None) -> np.ndarray:
    """Loss of each of `samples` free-running samples against the reference."""
    if samples < 1:
        raise ContractError("need at least one sample", kind="bayes_risk")
    loss_fn = RISK_LOSSES[loss] if isinstance(loss, str) else loss
    max_length = max_length if max_length is not None else 2 * len(y_ref) + 10
    values: List[float] = []
    for _ in range(samples):
        drawn = sample_decode(x, params, rng, max_length=max_length)
        values.append(float(loss_fn(list(y_ref), drawn.output)))
    return np.array(values)


def bayes_risk_estimate(params, x: Sequence[int], y_ref: Sequence[int], samples: int,
                        rng: np.random.Generator,
                        loss: Union[str, Callable[[Sequence[int], Sequence[int]], float]] = "bleu",
                        max_length: Optional[int] = None) -> float:
    """
    Monte-Carlo expected loss under the model's output distribution.

    Samples are drawn from the model, so each carries equal weight.
    """
    return float(np.mean(bayes_risk_losses(params, x, y_ref, samples, rng, loss, max_length)))
