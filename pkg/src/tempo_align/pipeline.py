"""Three-stage recipe: frozen image/text stubs, audio-image pretraining,
audio-text fine-tuning, plus evaluation and the strategy comparison matrix."""

from __future__ import annotations

import hashlib
import json
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import retrieval
from .config import RunConfig, StageConfig
from .encoders import (EncoderParams, StubEmbedder, TokenGridSpec, encode_matrix, encode_segments,
                       init_audio_from_image, init_encoder, params_from_arrays, params_to_arrays)
from .errors import DataError, InvalidInputError
from .formats import read_jsonl, read_xck, read_xmf, write_jsonl, write_xck
from .objective import LogitScale, info_nce_grad
from .optim import Lars, lr_at
from .pairing import MULTIFRAME, PairingStrategy, build_batch_sims
from .runtime import configure_threads

log = logging.getLogger(__name__)

IMAGE_SPEC = TokenGridSpec((224, 224), (32, 32), (32, 32))
AUDIO_PATCH, AUDIO_STRIDE = (32, 32), (16, 24)


@dataclass
class Split:
    clip_ids: list[str]
    features: torch.Tensor            # (N, rows, cols) float32
    frames: np.ndarray                # (N, L, D) frozen image embeddings
    captions: list[np.ndarray]        # per clip (n_captions, D)
    eval_frame: np.ndarray            # (N,) frame used for single-image evaluation

    def __len__(self) -> int:
        return len(self.clip_ids)

    def captioned(self) -> np.ndarray:
        return np.array([i for i, c in enumerate(self.captions) if len(c)], dtype=np.int64)


@dataclass
class Dataset:
    splits: dict[str, Split]
    image_stub: StubEmbedder
    text_stub: StubEmbedder

    def __getitem__(self, name: str) -> Split:
        if name not in self.splits or len(self.splits[name]) == 0:
            raise DataError(f"manifest has no {name!r} split")
        return self.splits[name]

    def stub_digest(self) -> str:
        """Hash of every frozen image/text embedding in the dataset."""
        h = hashlib.sha256()
        for name in sorted(self.splits):
            s = self.splits[name]
            h.update(np.ascontiguousarray(s.frames).tobytes())
            for c in s.captions:
                h.update(np.ascontiguousarray(c).tobytes())
        return h.hexdigest()


def make_stubs(cfg: RunConfig, latent_dim: int) -> tuple[StubEmbedder, StubEmbedder]:
    # one seed for both: image and text share the aligned space
    return (StubEmbedder(cfg.clip_seed, cfg.D, latent_dim, cfg.stub_jitter),
            StubEmbedder(cfg.clip_seed, cfg.D, latent_dim, cfg.stub_jitter))


def load_dataset(data_dir: str | Path, cfg: RunConfig) -> Dataset:
    root = Path(data_dir)
    records = read_jsonl(root / "manifest.jsonl")
    if not records:
        raise DataError(f"{root}/manifest.jsonl is empty")
    latent_dim = len(records[0]["frame_latents"][0])
    image_stub, text_stub = make_stubs(cfg, latent_dim)
    by_split: dict[str, list[dict]] = {}
    for rec in records:
        by_split.setdefault(rec["split"], []).append(rec)
    splits = {}
    for name, recs in by_split.items():
        feats, frames, caps, eval_frame = [], [], [], []
        for rec in recs:
            if not rec.get("feature_path"):
                raise DataError(f"{rec['clip_id']}: no features; run the extract stage")
            feats.append(read_xmf(root / rec["feature_path"]))
            fl = np.asarray(rec["frame_latents"], dtype=np.float64)
            if fl.shape[0] != cfg.L:
                raise DataError(f"{rec['clip_id']}: {fl.shape[0]} frames, config expects L={cfg.L}")
            frames.append(image_stub.embed_many(
                [f"img/{rec['clip_id']}/{l}" for l in range(fl.shape[0])], fl))
            cl = np.asarray(rec.get("caption_latents", []), dtype=np.float64).reshape(-1, latent_dim)
            caps.append(text_stub.embed_many(
                [f"cap/{rec['clip_id']}/{j}" for j in range(cl.shape[0])], cl).reshape(-1, cfg.D))
            eval_frame.append(zlib.crc32(rec["clip_id"].encode()) % cfg.L)
        if len({f.shape for f in feats}) != 1:
            raise DataError(f"{name}: feature matrices differ in shape")
        splits[name] = Split([r["clip_id"] for r in recs], torch.as_tensor(np.stack(feats)),
                             np.stack(frames), caps, np.asarray(eval_frame))
    return Dataset(splits, image_stub, text_stub)


@dataclass
class Checkpoint:
    params: EncoderParams
    log_scale: float
    optimizer: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    epoch: int = 0
    strategy: str = "random"
    config_hash: str = ""
    clip_seed: int = 0
    seed: int = 0

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = params_to_arrays(self.params, "audio/")
        out["logit/log_scale"] = np.array(self.log_scale, dtype=np.float32)
        for k, v in self.optimizer.items():
            out[k] = v.detach().cpu().numpy()
        sp = self.params.spec
        # integers travel in tensor names: float32 values are exact only below 2**24
        for k, v in (("epoch", self.epoch), ("seed", self.seed), ("clip_seed", self.clip_seed)):
            out[f"meta/{k}/{int(v)}"] = np.array(0, dtype=np.float32)
        out[f"meta/strategy/{self.strategy}"] = np.array(0, dtype=np.float32)
        out[f"meta/config/{self.config_hash}"] = np.array(0, dtype=np.float32)
        grid = "/".join("x".join(str(v) for v in hw) for hw in (sp.input_hw, sp.patch_hw, sp.stride_hw))
        out[f"meta/grid/{grid}"] = np.array(0, dtype=np.float32)
        return out

    def save(self, path: str | Path) -> None:
        write_xck(path, self.arrays())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        if not Path(path).exists():
            raise InvalidInputError(f"checkpoint not found: {path}")
        arrays = read_xck(path)
        tags = {}
        for key in arrays:
            for tag in ("strategy", "config", "grid", "epoch", "seed", "clip_seed"):
                prefix = f"meta/{tag}/"
                if key.startswith(prefix):
                    tags[tag] = key[len(prefix):]
        missing = {"strategy", "config", "grid", "epoch", "seed", "clip_seed"} - set(tags)
        if missing:
            raise DataError(f"{path}: checkpoint lacks metadata {sorted(missing)}")
        dims = [tuple(int(v) for v in part.split("x")) for part in tags["grid"].split("/")]
        spec = TokenGridSpec(*dims)
        return cls(
            params=params_from_arrays(arrays, spec, "audio/"),
            log_scale=float(arrays["logit/log_scale"]),
            optimizer=OrderedDict((k, torch.as_tensor(v)) for k, v in arrays.items() if k.startswith("opt/")),
            epoch=int(tags["epoch"]), strategy=tags["strategy"], config_hash=tags["config"],
            clip_seed=int(tags["clip_seed"]), seed=int(tags["seed"]))

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.arrays().items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f4").tobytes())
        return h.hexdigest()


def initial_checkpoint(cfg: RunConfig, seed: int, feature_hw: tuple[int, int]) -> Checkpoint:
    """Seeded image tower, transferred onto the audio token grid."""
    image = init_encoder(IMAGE_SPEC, seed, cfg.width, cfg.depth, cfg.D)
    audio = init_audio_from_image(image, TokenGridSpec(feature_hw, AUDIO_PATCH, AUDIO_STRIDE))
    return Checkpoint(params=audio, log_scale=LogitScale().log_scale, strategy=cfg.strategy,
                      config_hash=cfg.model_hash(), clip_seed=cfg.clip_seed, seed=seed)


@torch.no_grad()
def embed_audio(params: EncoderParams, features: torch.Tensor, L: int | None = None,
                chunk: int = 256) -> np.ndarray:
    """Whole-clip embeddings ``(N, D)``, or per-segment blocks ``(N, L, D)`` when ``L`` is given."""
    def run(i: int) -> np.ndarray:
        with torch.no_grad():
            x = features[i:i + chunk]
            e = encode_segments(x, L, params) if L else encode_matrix(x, params)
            return e.to(torch.float64).numpy()

    starts = range(0, features.shape[0], chunk)
    workers = configure_threads()
    if workers == 1 or len(starts) == 1:
        return np.concatenate([run(i) for i in starts])
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return np.concatenate(list(pool.map(run, starts)))


def eval_ai(params: EncoderParams, split: Split, strategy: str, L: int, seed=None):
    if PairingStrategy.parse(strategy).kind == MULTIFRAME:
        return retrieval.eval_audio_image(embed_audio(params, split.features, L), split.frames,
                                          "multiframe", seed=seed)
    images = split.frames[np.arange(len(split)), split.eval_frame]
    return retrieval.eval_audio_image(embed_audio(params, split.features), images, "single", seed=seed)


def eval_at(params: EncoderParams, split: Split, seed=None):
    counts = {len(c) for c in split.captions}
    if len(counts) != 1 or 0 in counts:
        raise DataError("every evaluated clip needs the same non-zero number of captions")
    (c,) = counts
    return retrieval.eval_audio_text(embed_audio(params, split.features), np.stack(split.captions),
                                     captions_per_clip=c, seed=seed)


@dataclass
class StageResult:
    checkpoint: Checkpoint
    best: Checkpoint
    history: list[dict]


def _train(ckpt: Checkpoint, cfg: RunConfig, st: StageConfig, data: Dataset, kind: str,
           strategy: PairingStrategy, out_dir: Path | None) -> StageResult:
    configure_threads()
    params = ckpt.params.clone().requires_grad_(True)
    log_scale = torch.tensor(ckpt.log_scale, dtype=torch.float32)
    leaves = OrderedDict(params.tensors)
    leaves["log_scale"] = log_scale
    opt = Lars(leaves, st.lars())
    if kind == "ai":
        opt.load_state_arrays({k.replace("opt/pretrain/", "opt/"): v for k, v in ckpt.optimizer.items()})
    train = data["train"]
    pool = np.arange(len(train)) if kind == "ai" else train.captioned()
    if len(pool) < 1:
        raise DataError("no training clips available for this stage")
    val = data.splits.get("val")
    seed = ckpt.seed
    sched = st.schedule()
    history: list[dict] = []
    best, best_score = None, -1.0
    audit = open(out_dir / f"selection_{kind}.jsonl", "w") if (out_dir and cfg.audit and kind == "ai") else None
    try:
        for epoch in range(st.epochs):
            lr_w = lr_at(epoch, st.lr_weights, sched)
            lr_b = lr_at(epoch, st.lr_bias, sched)
            order = pool[np.random.default_rng([seed, epoch, 0xB17C]).permutation(len(pool))]
            n_batches = max(1, len(order) // st.batch_size)
            losses = []
            for b in range(n_batches):
                idx = np.sort(order[b * st.batch_size:(b + 1) * st.batch_size])
                scale = LogitScale(float(log_scale))
                feats = train.features[idx]
                if kind == "ai":
                    bs = build_batch_sims(strategy, feats, [train.clip_ids[i] for i in idx], idx,
                                          params, train.frames[idx], epoch, seed, scale)
                    audio, targets = bs.audio, bs.targets
                    if audit:
                        for rec in bs.records:
                            audit.write(json.dumps(rec, sort_keys=True) + "\n")
                else:
                    audio = encode_matrix(feats, params)
                    targets = np.stack([train.captions[i][0] for i in idx])
                loss, dQ, _, d_scale = info_nce_grad(audio.detach().to(torch.float64).numpy(),
                                                     targets, scale)
                names = list(params.tensors)
                grads = torch.autograd.grad(audio, [params[n] for n in names],
                                            grad_outputs=torch.as_tensor(dQ, dtype=audio.dtype),
                                            allow_unused=True)
                gdict = {n: g for n, g in zip(names, grads) if g is not None}
                gdict["log_scale"] = torch.tensor(d_scale, dtype=torch.float32)
                opt.step(gdict, lr_w, lr_b)
                with torch.no_grad():
                    log_scale.clamp_(max=LogitScale().clamp_max)
                losses.append(loss)
            entry = {"stage": kind, "epoch": epoch, "lr_weights": lr_w, "train_loss": float(np.mean(losses))}
            if val is not None and len(val):
                if kind == "ai":
                    reps = eval_ai(params, val, str(strategy), cfg.L)
                else:
                    reps = eval_at(params, val)
                for r in reps:
                    for k, v in r.metrics.items():
                        entry[f"val {r.direction} R@{k}"] = v
                score = reps[0].metrics[1]
            else:
                score = -entry["train_loss"]
            history.append(entry)
            log.info("%s", json.dumps(entry))
            current = _snapshot(params, log_scale, opt, epoch + 1, ckpt, strategy, cfg, kind)
            if score > best_score:
                best, best_score = current, score
    finally:
        if audit:
            audit.close()
    final = _snapshot(params, log_scale, opt, st.epochs, ckpt, strategy, cfg, kind)
    return StageResult(final, best or final, history)


def _snapshot(params, log_scale, opt, epoch, ckpt, strategy, cfg, kind) -> Checkpoint:
    stage = "pretrain" if kind == "ai" else "finetune"
    state = OrderedDict((k.replace("opt/", f"opt/{stage}/", 1), v.detach().clone())
                        for k, v in opt.state_arrays().items())
    return Checkpoint(params=params.clone(), log_scale=float(log_scale), optimizer=state,
                      epoch=epoch if kind == "ai" else ckpt.epoch + epoch,
                      strategy=str(strategy), config_hash=cfg.model_hash(),
                      clip_seed=cfg.clip_seed, seed=ckpt.seed)


def pretrain_audio_image(cfg: RunConfig, data: Dataset, seed: int,
                         out_dir: str | Path | None = None,
                         init: Checkpoint | None = None) -> StageResult:
    strategy = cfg.pairing()
    data["train"]  # raises DataError when the split is missing
    ckpt = init or initial_checkpoint(cfg, seed, tuple(data["train"].features.shape[1:]))
    ckpt.strategy = str(strategy)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    res = _train(ckpt, cfg, cfg.pretrain, data, "ai", strategy, out)
    if out:
        res.checkpoint.save(out / "pretrain_last.xck")
        res.best.save(out / "pretrain_best.xck")
        write_jsonl(out / "history_pretrain.jsonl", res.history)
    return res


def finetune_audio_text(cfg: RunConfig, data: Dataset, ckpt: Checkpoint | None,
                        out_dir: str | Path | None = None) -> StageResult:
    if ckpt is None:
        raise InvalidInputError("fine-tuning needs a pretrained checkpoint")
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    res = _train(ckpt, cfg, cfg.finetune, data, "at", PairingStrategy.parse(ckpt.strategy), out)
    if out:
        res.checkpoint.save(out / "finetune_last.xck")
        res.best.save(out / "finetune_best.xck")
        write_jsonl(out / "history_finetune.jsonl", res.history)
    return res


def evaluate(ckpt: Checkpoint, data: Dataset, directions: Sequence[str] = ("ai", "at"),
             L: int = 4) -> list[retrieval.RetrievalReport]:
    test = data["test"]
    reports = []
    if "ai" in directions:
        reports += eval_ai(ckpt.params, test, ckpt.strategy, L, seed=ckpt.seed)
    if "at" in directions:
        reports += eval_at(ckpt.params, test, seed=ckpt.seed)
    return reports


def write_evaluation(out_dir: str | Path, label: str,
                     reports_by_seed: Sequence[Sequence[retrieval.RetrievalReport]]) -> str:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    flat = [r for reps in reports_by_seed for r in reps]
    retrieval.dump_reports(out / "reports.json", flat)
    by_dir: dict[str, list] = {}
    for r in flat:
        by_dir.setdefault(r.direction, []).append(r)
    dirs = [d for d in (retrieval.A2I, retrieval.I2A, retrieval.T2A, retrieval.A2T) if d in by_dir]
    table = retrieval.format_table({label: by_dir}, dirs)
    (out / "table.txt").write_text(table + "\n")
    return table


@dataclass
class MatrixResult:
    ai: dict[str, list[list[retrieval.RetrievalReport]]]
    at: dict[str, list[list[retrieval.RetrievalReport]]]
    init_digests: dict[str, list[str]]
    table: str

    def mean_recall(self, row: str, direction: str, k: int = 1) -> float:
        src = self.ai if direction in (retrieval.A2I, retrieval.I2A) else self.at
        vals = [r.metrics[k] for reps in src[row] for r in reps if r.direction == direction]
        return float(np.mean(vals))


def run_experiment_matrix(cfg: RunConfig, data: Dataset, rows: Sequence[str] | None = None,
                          out_dir: str | Path | None = None) -> MatrixResult:
    """Train every row strategy from the same initialisation per seed and
    tabulate A<->I (after pretraining) and A<->T (after fine-tuning)."""
    rows = list(rows or cfg.matrix_rows)
    out = Path(out_dir) if out_dir else None
    feature_hw = tuple(data["train"].features.shape[1:])
    ai, at, digests = {}, {}, {}
    for row in rows:
        strategy = str(PairingStrategy.parse(row))
        row_cfg = RunConfig.from_dict({**cfg.__dict__, "strategy": strategy, "stage": "matrix"})
        ai[strategy], at[strategy], digests[strategy] = [], [], []
        for seed in cfg.seeds:
            init = initial_checkpoint(row_cfg, seed, feature_hw)
            digests[strategy].append(_params_digest(init.params))
            run_dir = out / strategy.replace(":", "_") / f"seed{seed}" if out else None
            pre = pretrain_audio_image(row_cfg, data, seed, run_dir, init=init)
            ai[strategy].append(evaluate(pre.checkpoint, data, ("ai",), cfg.L))
            fine = finetune_audio_text(row_cfg, data, pre.checkpoint, run_dir)
            at[strategy].append(evaluate(fine.checkpoint, data, ("at",), cfg.L))
            log.info("matrix row %s seed %d done", strategy, seed)
    table = _matrix_table(ai, at)
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "matrix_table.txt").write_text(table + "\n")
        recs = []
        for src in (ai, at):
            for row, per_seed in src.items():
                for reps in per_seed:
                    for r in reps:
                        recs += [{**rec, "model": row} for rec in r.to_records()]
        with open(out / "matrix_reports.json", "w", encoding="utf-8") as fh:
            json.dump(recs, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return MatrixResult(ai, at, digests, table)


def _params_digest(params: EncoderParams) -> str:
    h = hashlib.sha256()
    for k, v in params.tensors.items():
        h.update(k.encode())
        h.update(v.detach().numpy().tobytes())
    return h.hexdigest()


def _matrix_table(ai, at) -> str:
    rows = {}
    for row in ai:
        by_dir: dict[str, list] = {}
        for reps in ai[row] + at[row]:
            for r in reps:
                by_dir.setdefault(r.direction, []).append(r)
        rows[row] = by_dir
    return retrieval.format_table(rows, [retrieval.A2I, retrieval.I2A, retrieval.T2A, retrieval.A2T])
