"""Synthetic audio/frame/caption triples with a time-localised event.

Every clip has a background latent shared by all of its segments, a
per-segment drift shared by the audio segment and the frame at the same
time, and one event that appears in a single segment. Frames add visual
noise; captions describe mostly the event. Audio is rendered as a bank of
tones whose log-energies follow the segment latents, so the regular FBANK
front end recovers the latents approximately linearly.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import features as feat
from .errors import InvalidInputError
from .formats import write_jsonl, write_wav, write_xmf
from .runtime import worker_count

SPLITS = ("train", "val", "test")
_SPLIT_CODE = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class SceneSpec:
    latent_dim: int = 16
    n_clips: int = 512
    L: int = 4
    event_strength: float = 0.8
    noise_sigma: float = 0.5
    seed: int = 0
    n_val: int = 64
    n_test: int = 128
    n_captioned: int = 128
    background_sigma: float = 0.3
    drift_sigma: float = 0.3
    audio_noise: float = 0.3
    caption_noise: float = 0.15
    # 2.575 s at 16 kHz gives exactly 256 frames of 10 ms with a 25 ms window
    duration_s: float = 2.575
    sample_rate: int = 16000

    def __post_init__(self):
        if self.n_clips < 2:
            raise InvalidInputError("need at least two training clips")
        if not 0.0 <= self.event_strength <= 1.0:
            raise InvalidInputError("event_strength must lie in [0, 1]")
        if self.L < 1 or self.latent_dim < 1:
            raise InvalidInputError("L and latent_dim must be >= 1")
        if min(self.noise_sigma, self.audio_noise, self.caption_noise) < 0:
            raise InvalidInputError("noise levels must be non-negative")
        if not 0 <= self.n_captioned <= self.n_clips:
            raise InvalidInputError("n_captioned must be within [0, n_clips]")

    def split_size(self, split: str) -> int:
        return {"train": self.n_clips, "val": self.n_val, "test": self.n_test}[split]


def desk_fbank_config() -> feat.FbankConfig:
    """Reduced front end used with synthetic scenes: 80 mel bins, 256 frames."""
    return feat.FbankConfig(n_mels=80, target_frames=256)


@dataclass
class SynthClip:
    clip_id: str
    split: str
    background_latent: np.ndarray
    event_latent: np.ndarray
    event_frame: int
    segment_latents: np.ndarray   # (L, latent_dim), what the audio renders
    frame_latents: np.ndarray     # (L, latent_dim)
    caption_latents: np.ndarray   # (n_captions, latent_dim)
    timestamps: list[float] = field(default_factory=list)


def frame_timestamps(duration_s: float, L: int) -> list[float]:
    """Centres of ``L`` equal segments."""
    if duration_s <= 0 or L < 1:
        raise InvalidInputError("need duration > 0 and L >= 1")
    return [duration_s * (l + 0.5) / L for l in range(L)]


def n_captions(spec: SceneSpec, split: str, index: int) -> int:
    if split == "test":
        return 5
    if split == "train":
        return 1 if index < spec.n_captioned else 0
    return 1


def make_clip(spec: SceneSpec, split: str, index: int) -> SynthClip:
    rng = np.random.default_rng([spec.seed, _SPLIT_CODE[split], index])
    d, L, alpha = spec.latent_dim, spec.L, spec.event_strength
    background = spec.background_sigma * rng.standard_normal(d)
    event = rng.standard_normal(d)
    event_frame = int(rng.integers(L))
    drift = spec.drift_sigma * rng.standard_normal((L, d))
    segments = background[None, :] + drift
    segments[event_frame] += alpha * event
    frames = segments + spec.noise_sigma * rng.standard_normal((L, d))
    audio = segments + spec.audio_noise * rng.standard_normal((L, d))
    mix = (1.0 - alpha) * _unit(background) + alpha * _unit(event)
    mix = _unit(mix) * np.sqrt(d)
    n_cap = n_captions(spec, split, index)
    captions = mix[None, :] + spec.caption_noise * rng.standard_normal((n_cap, d))
    return SynthClip(
        clip_id=f"{split}-{index:05d}", split=split, background_latent=background,
        event_latent=event, event_frame=event_frame, segment_latents=audio,
        frame_latents=frames, caption_latents=captions.reshape(n_cap, d),
        timestamps=frame_timestamps(spec.duration_s, L))


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def tone_bins(n_tones: int, n_mels: int, stride: int = 24, step: int = 5) -> np.ndarray:
    """Mel bins for the tones, chosen with distinct residues modulo the patch
    stride so overlapping frequency patches never fold two tones onto the
    same in-patch position."""
    bins, used = [], set()
    b = 2
    while len(bins) < n_tones and b < n_mels:
        if b % stride not in used:
            bins.append(b)
            used.add(b % stride)
        b += step if len(used) < stride else 1
    if len(bins) < n_tones:
        raise InvalidInputError(f"cannot place {n_tones} tones in {n_mels} mel bins")
    return np.asarray(bins)


class ToneBank:
    """One sinusoid per latent dimension, each at the centre of a mel filter."""

    def __init__(self, spec: SceneSpec, cfg: feat.FbankConfig):
        nyquist = spec.sample_rate / 2.0
        edges = np.linspace(feat._mel(cfg.low_freq), feat._mel(nyquist), cfg.n_mels + 2)
        centres_mel = edges[1:-1]
        self.bins = tone_bins(spec.latent_dim, cfg.n_mels)
        self.freqs = 700.0 * np.expm1(centres_mel[self.bins] / 1127.0)
        n = int(round(spec.duration_s * spec.sample_rate))
        t = np.arange(n) / spec.sample_rate
        self.tones = np.sin(2.0 * np.pi * self.freqs[:, None] * t[None, :])
        self.n_samples = n
        self.L = spec.L

    def render(self, segment_latents: np.ndarray, rng: np.random.Generator,
               floor: float = 1e-3) -> np.ndarray:
        # log-power of tone k in segment l tracks segment_latents[l, k]
        amps = 0.02 * np.exp(0.5 * segment_latents)
        bounds = np.linspace(0, self.n_samples, self.L + 1).round().astype(int)
        out = floor * rng.standard_normal(self.n_samples)
        for l in range(self.L):
            a, b = bounds[l], bounds[l + 1]
            out[a:b] += amps[l] @ self.tones[:, a:b]
        return out


def render_waveform(spec: SceneSpec, clip: SynthClip, bank: ToneBank) -> feat.Waveform:
    idx = int(clip.clip_id.rsplit("-", 1)[1])
    rng = np.random.default_rng([spec.seed, _SPLIT_CODE[clip.split], idx, 1])
    return feat.Waveform(bank.render(clip.segment_latents, rng), spec.sample_rate)


def generate_clips(spec: SceneSpec) -> list[SynthClip]:
    return [make_clip(spec, s, i) for s in SPLITS for i in range(spec.split_size(s))]


def clip_record(clip: SynthClip) -> dict:
    rec = {
        "clip_id": clip.clip_id,
        "split": clip.split,
        "feature_path": None,
        "frame_latents": clip.frame_latents.tolist(),
        "frame_timestamps": clip.timestamps,
        "caption_latents": clip.caption_latents.tolist(),
    }
    if clip.split == "train":
        rec["event_frame"] = clip.event_frame
    return rec


def generate(spec: SceneSpec, out_dir: str | Path, cfg: feat.FbankConfig | None = None,
             extract: bool = True, keep_audio: bool = False) -> list[dict]:
    """Write a manifest (and audio and/or features) under ``out_dir``.

    With ``extract`` the waveforms go straight through the FBANK pipeline
    and only standardised XMF1 features are stored; ``keep_audio`` also
    writes float WAV files for the separate ``extract`` stage.
    """
    cfg = cfg or desk_fbank_config()
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    if keep_audio:
        (out / "audio").mkdir(parents=True, exist_ok=True)
    clips = generate_clips(spec)
    bank = ToneBank(spec, cfg)
    records = [clip_record(c) for c in clips]

    def work(i: int):
        clip = clips[i]
        w = render_waveform(spec, clip, bank)
        if keep_audio:
            path = out / "audio" / f"{clip.clip_id}.wav"
            write_wav(path, w.samples, w.sample_rate)
            records[i]["wav_path"] = str(path.relative_to(out))
        return feat.extract(w, cfg) if extract else None

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        mats = list(pool.map(work, range(len(clips))))
    if extract:
        write_features(out, records, mats)
    write_jsonl(out / "manifest.jsonl", records)
    write_jsonl(out / "scene.jsonl", [asdict(spec)])
    return records


def write_features(out: Path, records: list[dict], mats: list[np.ndarray]) -> feat.CorpusStats:
    """Standardise with training-split statistics and write one XMF1 per clip."""
    stats = feat.compute_corpus_stats(m for r, m in zip(records, mats) if r["split"] == "train")
    (out / "features").mkdir(parents=True, exist_ok=True)
    for rec, m in zip(records, mats):
        path = out / "features" / f"{rec['clip_id']}.xmf"
        write_xmf(path, feat.normalize_fbank(m, stats))
        rec["feature_path"] = str(path.relative_to(out))
    write_jsonl(out / "fbank_stats.jsonl", [{"mean": stats.mean, "std": stats.std}])
    return stats
