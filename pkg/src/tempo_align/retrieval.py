"""Recall@k evaluation for audio-image and audio-text retrieval."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidInputError
from .objective import cosine_matrix

A2I, I2A, A2T, T2A = "A->I", "I->A", "A->T", "T->A"
AI_KS = (1, 5)
AT_KS = (1, 10)


@dataclass
class GroundTruth:
    """Relevant gallery indices for each query (query i is row i of a score matrix)."""

    relevance: list[frozenset[int]]
    gallery_size: int

    def __post_init__(self):
        self.relevance = [frozenset(int(g) for g in r) for r in self.relevance]
        for q, rel in enumerate(self.relevance):
            if not rel:
                raise InvalidInputError(f"query {q} has no relevant gallery item")
            if min(rel) < 0 or max(rel) >= self.gallery_size:
                raise InvalidInputError(f"query {q} references a gallery item out of range")

    @property
    def n_queries(self) -> int:
        return len(self.relevance)

    def mask(self) -> np.ndarray:
        m = np.zeros((self.n_queries, self.gallery_size), dtype=bool)
        for q, rel in enumerate(self.relevance):
            m[q, list(rel)] = True
        return m


@dataclass
class RetrievalReport:
    direction: str
    metrics: dict[int, float]
    n_queries: int
    mode: str = "single"
    seed: int | None = None

    def to_records(self) -> list[dict]:
        return [{"direction": self.direction, "k": k, "recall": r, "n_queries": self.n_queries,
                 "mode": self.mode, "seed": self.seed} for k, r in sorted(self.metrics.items())]


def rank_of_best_target(scores, relevant) -> int:
    """1-based rank of the best relevant item; ties with non-relevant items count against it."""
    scores = np.asarray(scores, dtype=np.float64)
    rel = sorted(set(int(r) for r in relevant))
    if not rel:
        raise InvalidInputError("relevant set is empty")
    if scores.size == 0:
        raise InvalidInputError("gallery is empty")
    is_rel = np.zeros(scores.size, dtype=bool)
    is_rel[rel] = True
    best = scores[is_rel].max()
    return 1 + int(np.count_nonzero(~is_rel & (scores >= best)))


def ranks(gt: GroundTruth, scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (gt.n_queries, gt.gallery_size):
        raise InvalidInputError(
            f"scores {scores.shape} do not match ground truth ({gt.n_queries}, {gt.gallery_size})")
    mask = gt.mask()
    best = np.where(mask, scores, -np.inf).max(axis=1, keepdims=True)
    return 1 + np.count_nonzero(~mask & (scores >= best), axis=1)


def recall_at_k(gt: GroundTruth, scores, k: int) -> float:
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    return float(np.mean(ranks(gt, scores) <= k))


def report(direction: str, gt: GroundTruth, scores, ks: Sequence[int], mode: str = "single",
           seed: int | None = None) -> RetrievalReport:
    r = ranks(gt, scores)
    return RetrievalReport(direction, {int(k): float(np.mean(r <= k)) for k in ks},
                           gt.n_queries, mode, seed)


def eval_audio_text(audio_embs, caption_embs, scale: float = 1.0, ks: Sequence[int] = AT_KS,
                    captions_per_clip: int = 5, seed: int | None = None):
    """A->T queries every clip against all captions; T->A queries every caption
    against all clips. Returns ``(t2a, a2t)``."""
    audio = np.asarray(audio_embs, dtype=np.float64)
    caps = np.asarray(caption_embs, dtype=np.float64)
    N = audio.shape[0]
    if caps.ndim != 3 or caps.shape[0] != N or caps.shape[1] != captions_per_clip:
        raise InvalidInputError(
            f"expected captions of shape ({N}, {captions_per_clip}, D), got {caps.shape}")
    flat = caps.reshape(N * captions_per_clip, -1)
    owner = np.repeat(np.arange(N), captions_per_clip)
    s = scale * cosine_matrix(audio, flat)
    a2t_gt = GroundTruth([np.flatnonzero(owner == i) for i in range(N)], N * captions_per_clip)
    t2a_gt = GroundTruth([[o] for o in owner], N)
    return (report(T2A, t2a_gt, s.T, ks, seed=seed), report(A2T, a2t_gt, s, ks, seed=seed))


def eval_audio_image(audio_embs, image_embs, mode: str = "single", scale: float = 1.0,
                     ks: Sequence[int] = AI_KS, seed: int | None = None):
    """Returns ``(a2i, i2a)``.

    ``single`` expects ``(N, D)`` on both sides; ``multiframe`` expects
    ``(N, L, D)`` blocks compared by cosine of their flattenings.
    """
    audio = np.asarray(audio_embs, dtype=np.float64)
    images = np.asarray(image_embs, dtype=np.float64)
    want = 2 if mode == "single" else 3 if mode == "multiframe" else None
    if want is None:
        raise InvalidInputError(f"unknown evaluation mode {mode!r}")
    if audio.ndim != want or audio.shape != images.shape:
        raise InvalidInputError(f"{mode} mode needs matching {want}-D arrays, got "
                                f"{audio.shape} and {images.shape}")
    N = audio.shape[0]
    s = scale * cosine_matrix(audio, images)
    gt = GroundTruth([[i] for i in range(N)], N)
    return (report(A2I, gt, s, ks, mode, seed), report(I2A, gt, s.T, ks, mode, seed))


def aggregate(reports: Sequence[RetrievalReport]) -> dict[int, tuple[float, float]]:
    """Mean and population std per k across seeds."""
    if not reports:
        raise InvalidInputError("nothing to aggregate")
    out = {}
    for k in reports[0].metrics:
        vals = np.array([r.metrics[k] for r in reports])
        out[k] = (float(vals.mean()), float(vals.std()))
    return out


def format_table(rows: Mapping[str, Mapping[str, Sequence[RetrievalReport]]],
                 directions: Sequence[str]) -> str:
    """Plain-text table, one row per model, ``mean ± std`` in percent."""
    header = ["Model"]
    ks_by_dir = {}
    for d in directions:
        first = next(r[d][0] for r in rows.values() if d in r)
        ks_by_dir[d] = sorted(first.metrics)
        header += [f"{d} R@{k}" for k in ks_by_dir[d]]
    lines = [header]
    for name, by_dir in rows.items():
        line = [name]
        for d in directions:
            agg = aggregate(by_dir[d])
            line += [f"{100 * agg[k][0]:.2f} ± {100 * agg[k][1]:.2f}" for k in ks_by_dir[d]]
        lines.append(line)
    widths = [max(len(l[i]) for l in lines) for i in range(len(header))]
    fmt = lambda l: "  ".join(c.ljust(w) for c, w in zip(l, widths)).rstrip()  # noqa: E731
    return "\n".join([fmt(lines[0]), "  ".join("-" * w for w in widths)] + [fmt(l) for l in lines[1:]])


def dump_reports(path, reports: Sequence[RetrievalReport]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([rec for r in reports for rec in r.to_records()], fh, indent=2, sort_keys=True)
        fh.write("\n")
