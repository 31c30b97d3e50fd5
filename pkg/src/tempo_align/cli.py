"""Command-line entry point.

Every subcommand reads an optional YAML run config and a few overriding
flags. ``synth`` and ``extract`` treat ``--out`` as the dataset directory;
the training and evaluation commands read data from ``--data`` (or the
config's ``data_dir``) and write runs under ``--out``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import features as feat
from . import pipeline, synth
from .config import RunConfig
from .errors import ConfigError, DataError, InvalidInputError
from .formats import read_jsonl, read_wav, write_jsonl
from .pairing import PairingStrategy

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3

log = logging.getLogger("tempo_align")


def _strategy(text: str) -> str:
    try:
        return str(PairingStrategy.parse(text))
    except InvalidInputError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML file whose keys mirror RunConfig")
    common.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    common.add_argument("--strategy", type=_strategy, help="random | nearest:<n> | multiframe")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tempo-align", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset").add_argument(
        "--audio-only", action="store_true", help="write WAV files and skip feature extraction")
    sub.add_parser("extract", parents=[common], help="compute FBANK features for a manifest")
    for name, text in (("pretrain", "audio-image pretraining"), ("finetune", "audio-text fine-tuning"),
                       ("evaluate", "retrieval evaluation on the test split"),
                       ("matrix", "train and compare every configured strategy")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data", type=Path, help="dataset directory (overrides data_dir)")
        if name in ("finetune", "evaluate"):
            p.add_argument("--checkpoint", type=Path, action="append",
                           help="checkpoint file; repeat for several seeds")
    return parser


def load_config(args, stage: str) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {"stage": stage}
    if args.strategy:
        overrides["strategy"] = args.strategy
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if getattr(args, "data", None):
        overrides["data_dir"] = str(args.data)
    if args.out:
        overrides["out_dir"] = str(args.out)
    return RunConfig.from_dict({**cfg.__dict__, **overrides})


def cmd_synth(cfg: RunConfig, args) -> None:
    out = Path(args.out or cfg.data_dir)
    spec = cfg.scene_spec(args.seed)
    records = synth.generate(spec, out, cfg.fbank_config(), extract=not args.audio_only,
                             keep_audio=args.audio_only)
    print(f"wrote {len(records)} clips to {out}")


def cmd_extract(cfg: RunConfig, args) -> None:
    root = Path(args.out or cfg.data_dir)
    records = read_jsonl(root / "manifest.jsonl")
    fcfg = cfg.fbank_config()
    mats = []
    for rec in records:
        if not rec.get("wav_path"):
            raise DataError(f"{rec['clip_id']}: manifest entry has no wav_path")
        try:
            samples, rate = read_wav(root / rec["wav_path"])
        except (OSError, ValueError) as exc:
            raise DataError(f"{rec['clip_id']}: cannot read audio: {exc}") from exc
        try:
            mats.append(feat.extract(feat.Waveform(samples, rate), fcfg))
        except InvalidInputError as exc:
            raise DataError(f"{rec['clip_id']}: {exc}") from exc
    stats = synth.write_features(root, records, mats)
    write_jsonl(root / "manifest.jsonl", records)
    print(f"extracted {len(mats)} clips (mean {stats.mean:.4f}, std {stats.std:.4f})")


def _seed_dir(cfg: RunConfig, seed: int) -> Path:
    return Path(cfg.out_dir) / f"seed{seed}"


def cmd_pretrain(cfg: RunConfig, args) -> None:
    data = pipeline.load_dataset(cfg.data_dir, cfg)
    for seed in cfg.seeds:
        res = pipeline.pretrain_audio_image(cfg, data, seed, _seed_dir(cfg, seed))
        last = res.history[-1] if res.history else {}
        print(f"seed {seed}: pretrained {res.checkpoint.epoch} epochs, "
              f"train loss {last.get('train_loss', float('nan')):.4f}")


def _checkpoints(cfg: RunConfig, args, names: tuple[str, ...]) -> list[Path]:
    given = args.checkpoint or ([Path(cfg.checkpoint)] if cfg.checkpoint else [])
    if given:
        paths = given
    else:
        paths = []
        for seed in cfg.seeds:
            found = [_seed_dir(cfg, seed) / n for n in names if (_seed_dir(cfg, seed) / n).exists()]
            paths.append(found[0] if found else _seed_dir(cfg, seed) / names[-1])
    for p in paths:
        if not p.exists():
            raise DataError(f"checkpoint not found: {p}")
    return paths


def cmd_finetune(cfg: RunConfig, args) -> None:
    data = pipeline.load_dataset(cfg.data_dir, cfg)
    for path in _checkpoints(cfg, args, ("pretrain_last.xck",)):
        ckpt = pipeline.Checkpoint.load(path)
        res = pipeline.finetune_audio_text(cfg, data, ckpt, _seed_dir(cfg, ckpt.seed))
        last = res.history[-1] if res.history else {}
        print(f"seed {ckpt.seed}: fine-tuned from {path}, "
              f"train loss {last.get('train_loss', float('nan')):.4f}")


def cmd_evaluate(cfg: RunConfig, args) -> None:
    data = pipeline.load_dataset(cfg.data_dir, cfg)
    reports, strategies = [], set()
    for path in _checkpoints(cfg, args, ("finetune_last.xck", "pretrain_last.xck")):
        ckpt = pipeline.Checkpoint.load(path)
        strategies.add(ckpt.strategy)
        reports.append(pipeline.evaluate(ckpt, data, ("ai", "at"), cfg.L))
    label = "/".join(sorted(strategies))
    print(pipeline.write_evaluation(cfg.out_dir, label, reports))


def cmd_matrix(cfg: RunConfig, args) -> None:
    data = pipeline.load_dataset(cfg.data_dir, cfg)
    rows = [cfg.strategy] if args.strategy else None
    res = pipeline.run_experiment_matrix(cfg, data, rows, cfg.out_dir)
    print(res.table)


COMMANDS = {
    "synth": ("synth", cmd_synth),
    "extract": ("extract", cmd_extract),
    "pretrain": ("pretrain_ai", cmd_pretrain),
    "finetune": ("finetune_at", cmd_finetune),
    "evaluate": ("evaluate", cmd_evaluate),
    "matrix": ("matrix", cmd_matrix),
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    pipeline.configure_threads()
    stage, fn = COMMANDS[args.command]
    try:
        cfg = load_config(args, stage)
    except (ConfigError, InvalidInputError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        fn(cfg, args)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, InvalidInputError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
