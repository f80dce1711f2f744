"""Correlational feature learning and deeply supervised CNN prediction
for paired-modality images."""

import os as _os

# CORRSIG_THREADS caps BLAS parallelism; must be set before numpy loads.
_threads = _os.environ.get("CORRSIG_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)
    del _var
del _os, _threads

from . import ops  # registers Tensor arithmetic methods
from .errors import (
    ConfigError,
    CorrsigError,
    DataError,
    DimensionError,
    TrainingError,
    UsageError,
)
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "no_grad",
    "ops",
    "CorrsigError",
    "DimensionError",
    "ConfigError",
    "UsageError",
    "DataError",
    "TrainingError",
    "__version__",
]
