"""Audio-image pairing strategies: random frame, epoch-gated nearest frame,
and the flattened multi-frame comparison."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .encoders import EncoderParams, encode_matrix, encode_segments
from .errors import InvalidInputError
from .objective import LogitScale, cosine_matrix, cosine_sim

RANDOM, NEAREST, MULTIFRAME = "random", "nearest", "multiframe"


@dataclass(frozen=True)
class FrameSet:
    frames: np.ndarray
    timestamps: tuple[float, ...] = ()

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim < 1 or frames.shape[0] == 0:
            raise InvalidInputError("a frame set needs at least one frame")
        object.__setattr__(self, "frames", frames)
        ts = tuple(float(t) for t in self.timestamps)
        if ts and (len(ts) != frames.shape[0] or any(b <= a for a, b in zip(ts, ts[1:]))):
            raise InvalidInputError("timestamps must be ascending, one per frame")
        object.__setattr__(self, "timestamps", ts)

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class PairingStrategy:
    kind: str
    n: int = 0

    def __post_init__(self):
        if self.kind not in (RANDOM, NEAREST, MULTIFRAME):
            raise InvalidInputError(f"unknown pairing strategy {self.kind!r}")
        if self.n < 0:
            raise InvalidInputError("nearest-match epoch gate must be >= 0")

    @classmethod
    def parse(cls, text: str) -> "PairingStrategy":
        m = re.fullmatch(r"(random|multiframe|nearest)(?::(\d+))?", text.strip().lower())
        if not m or (m.group(1) != NEAREST and m.group(2) is not None):
            raise InvalidInputError(f"cannot parse strategy {text!r}")
        return cls(m.group(1), int(m.group(2) or 0))

    def __str__(self) -> str:
        return f"nearest:{self.n}" if self.kind == NEAREST else self.kind


def clip_rng(seed: int, epoch: int, clip_index: int) -> np.random.Generator:
    """Counter-based generator: one independent stream per (seed, epoch, clip)."""
    return np.random.default_rng([int(seed), int(epoch), int(clip_index)])


def random_match(fs: FrameSet, rng: np.random.Generator) -> int:
    if len(fs) == 0:
        raise InvalidInputError("empty frame set")
    return int(rng.integers(len(fs)))


def frame_similarities(a, fs: FrameSet) -> np.ndarray:
    return cosine_matrix(np.asarray(a)[None, :], fs.frames)[0]


def nearest_match(a, fs: FrameSet, epoch: int, n: int, rng: np.random.Generator) -> int:
    """Most similar frame once ``epoch >= n``; a uniformly random frame before.

    ``np.argmax`` returns the first maximum, so ties go to the lowest index.
    """
    if epoch < n:
        return random_match(fs, rng)
    return int(np.argmax(frame_similarities(a, fs)))


def multiframe_sim(a_all, i_all) -> float:
    a_all, i_all = np.asarray(a_all), np.asarray(i_all)
    if a_all.shape != i_all.shape:
        raise InvalidInputError(f"block shapes differ: {a_all.shape} vs {i_all.shape}")
    return cosine_sim(a_all.ravel(), i_all.ravel())


@dataclass
class BatchSims:
    """Everything one contrastive step needs.

    ``audio`` still carries the autograd graph back into the encoder;
    ``targets`` are frozen image representations (one frame or an L x D
    block per clip); ``sims`` is the scaled similarity matrix.
    """

    audio: torch.Tensor
    targets: np.ndarray
    sims: np.ndarray
    records: list[dict] = field(default_factory=list)


def build_batch_sims(strategy: PairingStrategy, features, clip_ids: Sequence[str],
                     clip_indices: Sequence[int], params: EncoderParams,
                     frame_embeddings: np.ndarray, epoch: int, seed: int,
                     scale: LogitScale) -> BatchSims:
    """Encode a batch of clips and pair each with its image representation.

    ``features`` is ``(B, rows, cols)``; ``frame_embeddings`` is ``(B, L, D)``
    from the frozen image tower.
    """
    frames = np.asarray(frame_embeddings, dtype=np.float64)
    B = frames.shape[0]
    if B == 0 or len(clip_ids) != B or len(clip_indices) != B:
        raise InvalidInputError("batch must be non-empty and consistently sized")
    records = []
    if strategy.kind == MULTIFRAME:
        L = frames.shape[1]
        audio = encode_segments(features, L, params)
        audio_np = audio.detach().to(torch.float64).numpy()
        for b in range(B):
            seg_sims = (audio_np[b] * frames[b]).sum(axis=1)
            records.append(_record(clip_ids[b], epoch, strategy, None, seg_sims))
        audio = audio.reshape(B, -1)
        targets = frames.reshape(B, -1)
    else:
        audio = encode_matrix(features, params)
        audio_np = audio.detach().to(torch.float64).numpy()
        chosen = np.empty(B, dtype=np.int64)
        for b in range(B):
            fs = FrameSet(frames[b])
            rng = clip_rng(seed, epoch, clip_indices[b])
            if strategy.kind == NEAREST:
                chosen[b] = nearest_match(audio_np[b], fs, epoch, strategy.n, rng)
            else:
                chosen[b] = random_match(fs, rng)
            records.append(_record(clip_ids[b], epoch, strategy, int(chosen[b]),
                                   frame_similarities(audio_np[b], fs)))
        targets = frames[np.arange(B), chosen]
    sims = scale.value * cosine_matrix(audio.detach().to(torch.float64).numpy(), targets)
    return BatchSims(audio=audio, targets=targets, sims=sims, records=records)


def _record(clip_id, epoch, strategy, chosen, sims) -> dict:
    return {
        "clip_id": clip_id,
        "epoch": int(epoch),
        "strategy": str(strategy),
        "chosen_index": chosen,
        "similarities": [float(x) for x in sims],
    }


def write_audit(fh, records: Sequence[dict]) -> None:
    for rec in records:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
