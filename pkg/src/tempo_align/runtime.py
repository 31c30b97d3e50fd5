"""Thread settings shared by data generation, training and evaluation."""

from __future__ import annotations

import logging
import os

import torch

log = logging.getLogger(__name__)


def worker_count() -> int:
    """Worker cap from ``TEMPO_ALIGN_THREADS`` (default 1)."""
    n = os.environ.get("TEMPO_ALIGN_THREADS", "1")
    try:
        return max(1, int(n))
    except ValueError:
        log.warning("ignoring non-integer TEMPO_ALIGN_THREADS=%r", n)
        return 1


def configure_threads() -> int:
    """Pin torch to one intra-op thread and return the worker cap.

    Multi-threaded BLAS kernels change float summation order with the thread
    count, so parallelism is applied only across fixed-size work units
    whose results do not depend on how many workers run them.
    """
    torch.set_num_threads(1)
    return worker_count()
