"""Forcing lab: training regimes for attention-based sequence-to-sequence models"""

from .config import RunConfig, load_config
from .experiment import ExperimentRunner, evaluate_model, run_gradcheck
from .models import AlignedPair, DecodeResult, MetricRecord, TaskSpec
from .seq2seq import ModelDims, ModelParams

__version__ = "1.0.0"
__all__ = [
    "AlignedPair", "DecodeResult", "MetricRecord", "TaskSpec", "ModelDims", "ModelParams",
    "RunConfig", "load_config", "ExperimentRunner", "evaluate_model", "run_gradcheck",
]
