"""Scaled cosine similarity and symmetric InfoNCE with an analytic backward pass."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

DEFAULT_LOG_SCALE = math.log(1.0 / 0.07)
MAX_LOG_SCALE = math.log(100.0)


@dataclass
class LogitScale:
    log_scale: float = DEFAULT_LOG_SCALE
    clamp_max: float = MAX_LOG_SCALE

    def __post_init__(self):
        self.log_scale = min(float(self.log_scale), self.clamp_max)

    @property
    def value(self) -> float:
        return math.exp(min(self.log_scale, self.clamp_max))


def _rows(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a.reshape(1, -1) if a.ndim == 1 else a.reshape(a.shape[0], -1)


def _unit_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise InvalidInputError("cosine similarity is undefined for zero vectors")
    return x / norms[:, None], norms


def cosine_sim(q, k) -> float:
    q = np.asarray(q, dtype=np.float64).ravel()
    k = np.asarray(k, dtype=np.float64).ravel()
    if q.shape != k.shape:
        raise InvalidInputError(f"dimension mismatch {q.shape} vs {k.shape}")
    nq, nk = np.linalg.norm(q), np.linalg.norm(k)
    if nq == 0.0 or nk == 0.0:
        raise InvalidInputError("cosine similarity is undefined for zero vectors")
    return float(np.clip(q @ k / (nq * nk), -1.0, 1.0))


def cosine_matrix(Q, K) -> np.ndarray:
    """Pairwise cosine similarities; rows of ``Q`` and ``K`` are flattened first."""
    qn, _ = _unit_rows(_rows(Q))
    kn, _ = _unit_rows(_rows(K))
    if qn.shape[1] != kn.shape[1]:
        raise InvalidInputError(f"dimension mismatch {qn.shape[1]} vs {kn.shape[1]}")
    return qn @ kn.T


def sim_matrix(Q, K, s: LogitScale) -> np.ndarray:
    """Entry (i, j) is ``exp(log_scale) * cos(Q_i, K_j)``."""
    Q, K = _rows(Q), _rows(K)
    if Q.shape[0] != K.shape[0]:
        raise InvalidInputError(f"batch mismatch {Q.shape[0]} vs {K.shape[0]}")
    return s.value * cosine_matrix(Q, K)


def _log_softmax(S: np.ndarray, axis: int) -> np.ndarray:
    m = S.max(axis=axis, keepdims=True)
    return S - m - np.log(np.exp(S - m).sum(axis=axis, keepdims=True))


def info_nce(S) -> float:
    """Symmetric InfoNCE, averaged over the batch.

    The diagonal holds the positive pairs; each column is a softmax over
    queries and each row a softmax over keys.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] == 0:
        raise InvalidInputError(f"similarity matrix must be square, got {S.shape}")
    diag = np.arange(S.shape[0])
    col = _log_softmax(S, axis=0)[diag, diag]
    row = _log_softmax(S, axis=1)[diag, diag]
    return float(-(col + row).sum() / S.shape[0])


def info_nce_sim_grad(S) -> np.ndarray:
    """d info_nce / d S."""
    S = np.asarray(S, dtype=np.float64)
    B = S.shape[0]
    eye = np.eye(B)
    p_row = np.exp(_log_softmax(S, axis=1))
    p_col = np.exp(_log_softmax(S, axis=0))
    return (p_row - eye + p_col - eye) / B


def info_nce_grad(Q, K, s: LogitScale) -> tuple[float, np.ndarray, np.ndarray, float]:
    """Loss and exact gradients w.r.t. ``Q``, ``K`` (raw, un-normalised rows)
    and the log logit scale. The scale gradient ignores the clamp; callers
    re-clamp after each update.

    Inputs of shape ``(B, ...)`` are flattened per row; gradients come back
    in the input shapes.
    """
    Q_in, K_in = np.asarray(Q, dtype=np.float64), np.asarray(K, dtype=np.float64)
    Qr, Kr = _rows(Q_in), _rows(K_in)
    if Qr.shape != Kr.shape:
        raise InvalidInputError(f"shape mismatch {Q_in.shape} vs {K_in.shape}")
    qn, q_norm = _unit_rows(Qr)
    kn, k_norm = _unit_rows(Kr)
    scale = s.value
    C = qn @ kn.T
    S = scale * C
    G = info_nce_sim_grad(S)
    dC = scale * G
    d_qn = dC @ kn
    d_kn = dC.T @ qn
    dQ = (d_qn - qn * (qn * d_qn).sum(axis=1, keepdims=True)) / q_norm[:, None]
    dK = (d_kn - kn * (kn * d_kn).sum(axis=1, keepdims=True)) / k_norm[:, None]
    d_log_scale = float((G * S).sum())
    return info_nce(S), dQ.reshape(Q_in.shape), dK.reshape(K_in.shape), d_log_scale
