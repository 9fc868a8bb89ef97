"""
Early environment setup for threading and log verbosity.

This module MUST be imported before numpy so the BLAS/OpenMP thread pools
pick up the limits below.
"""

import logging
import os

# A single BLAS thread keeps float reductions in a fixed order, which the
# replay and checkpoint round-trip guarantees depend on.
num_threads = os.environ.get("STREAMGROUND_THREADS", "1")
for _var in (
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "BLIS_NUM_THREADS",
):
    os.environ.setdefault(_var, num_threads)

LOG_LEVEL_ENV = "STREAMGROUND_LOG_LEVEL"


def log_level_from_env(default: int = logging.WARNING) -> int:
    """Resolve the log level named by STREAMGROUND_LOG_LEVEL."""
    name = os.environ.get(LOG_LEVEL_ENV, "").strip().upper()
    if not name:
        return default
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else default


logging.getLogger("streamground").addHandler(logging.NullHandler())
