"""Utility functions for the forcing lab"""

import time
import logging
from functools import wraps
from typing import Callable, Any, Sequence

import numpy as np

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

SIMPLEX_TOLERANCE = 1e-6


def log_duration(label: str = None):
    """
    Timing decorator.

    Logs the wall time of the wrapped call at DEBUG level.

    Args:
        label: Name to log; defaults to the function name.

    Returns:
        A wrapped function that reports its own duration.
    """
    def decorator(func: Callable) -> Callable:
        name = label or func.__name__

        @wraps(func)
        def wrapper(*args, **kwargs) -> Any:
            started = time.perf_counter()
            try:
                return func(*args, **kwargs)
            finally:
                logger.debug(f"{name} took {format_seconds(time.perf_counter() - started)}")
        return wrapper
    return decorator


def derive_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Build an independent generator for one (seed, stream...) coordinate.

    Per-step generators are derived rather than carried so that a resumed
    run draws exactly what an uninterrupted run would have drawn.
    """
    return np.random.default_rng([int(seed), *[int(s) for s in stream]])


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: Sequence[int]) -> np.ndarray:
    """Uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape))


def format_seconds(seconds: float) -> str:
    return f"{seconds * 1000:.0f}ms" if seconds < 1.0 else f"{seconds:.2f}s"


def validate_simplex_rows(matrix, tolerance: float = SIMPLEX_TOLERANCE) -> bool:
    """True when `matrix` is 2-D, finite and every row is a distribution (sums within `tolerance` of 1)."""
    arr = np.asarray(matrix, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] == 0 or not np.all(np.isfinite(arr)):
        return False
    return bool(np.all(arr >= -tolerance) and np.all(np.abs(arr.sum(axis=1) - 1.0) <= tolerance))

