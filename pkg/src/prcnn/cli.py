"""Command-line entry point: ``prcnn <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from prcnn import audio_frontend as af
from prcnn import datasets as ds
from prcnn import model as M
from prcnn.errors import PrcnnError
from prcnn.training import loop
from prcnn.training.checkpoint import load_checkpoint, save_checkpoint
from prcnn.training.gradcheck import PRECISIONS, gradient_check

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def shard_stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix == ".prcn" else path


def split_paths(out) -> tuple[Path, Path]:
    stem = shard_stem(out)
    return stem.with_name(stem.name + ".train.prcn"), stem.with_name(stem.name + ".test.prcn")


def _write_split(train: af.Shard, test: af.Shard, out) -> None:
    train_path, test_path = split_paths(out)
    af.save_shard(train, train_path)
    af.save_shard(test, test_path)
    print(f"wrote {train_path} ({len(train)} clips) and {test_path} ({len(test)} clips)")


# --- subcommands --------------------------------------------------------------


def cmd_preprocess(args) -> int:
    manifest = ds.scan_dataset(args.data)
    train, test = ds.split(manifest, args.split, args.seed)
    window = None if args.window == "none" else args.window
    train_shard = ds.build_shard(train, manifest.class_count, manifest.label_names, window)
    test_shard = ds.build_shard(test, manifest.class_count, manifest.label_names, window)
    _write_split(train_shard, test_shard, args.out)
    manifest_path = args.manifest or shard_stem(args.out).with_name(shard_stem(args.out).name + ".manifest")
    manifest.save(manifest_path)
    print(f"wrote {manifest_path} ({len(manifest.entries)} songs, {manifest.class_count} genres)")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = ds.SynthSpec(class_count=args.classes, clips_per_class=args.clips,
                        noise_amplitude=args.noise, seed=args.seed)
    shard = ds.synth_generate(spec)
    train, test = ds.split_shard(shard, args.split, args.seed)
    _write_split(train, test, args.out)
    stem = shard_stem(args.out)
    manifest = ds.DatasetManifest(shard.label_names, sorted({(s, int(l)) for s, l in zip(shard.source_ids, shard.labels)}))
    manifest.assignment = {s: "train" for s in train.source_ids} | {s: "test" for s in test.source_ids}
    manifest.split_fraction, manifest.split_seed = args.split, args.seed
    manifest.save(stem.with_name(stem.name + ".manifest"))
    return EXIT_OK


def cmd_train(args) -> int:
    shard = af.load_shard(args.train)
    names = ds.DatasetManifest.load(args.manifest).label_names if args.manifest else []
    shard.label_names = names or [f"class{c:02d}" for c in range(shard.class_count)]
    mcfg = M.ModelConfig(fusion_mode=args.fusion, bgru_layers=args.rnn_layers, class_count=shard.class_count)
    cfg = loop.TrainConfig(batch_size=args.batch, epochs=args.epochs, seed=args.seed,
                           learning_rate=args.lr, optimizer=args.optimizer,
                           clip_norm=args.clip_norm, deterministic=args.deterministic, model=mcfg)
    metrics_path = Path(args.metrics) if args.metrics else Path(str(args.out) + ".metrics.jsonl")

    def report(m):
        print(f"epoch {m.epoch}: loss {m.mean_loss:.4f}, train accuracy {m.train_accuracy:.4f}", flush=True)

    try:
        ckpt, metrics = loop.train(shard, cfg, on_epoch=report)
    except loop.TrainingDiverged as exc:
        print(f"error: {exc}; no checkpoint written", file=sys.stderr)
        return EXIT_DATA
    ckpt.extra = {"train": {k: v for k, v in dataclasses.asdict(cfg).items() if k != "model"}}
    save_checkpoint(ckpt, args.out)
    af.atomic_write(metrics_path, "".join(m.to_json() + "\n" for m in metrics).encode("utf-8"))
    print(f"wrote {args.out} and {metrics_path}")
    if args.test:
        result = loop.evaluate(ckpt, af.load_shard(args.test))
        print(f"held-out accuracy: {result.accuracy:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    shard = af.load_shard(args.data)
    result = loop.evaluate(ckpt, shard, "per_song_majority" if args.by_song else "per_clip")
    print(result.report(ckpt.label_names))
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    specs = af.wav_to_spectrograms(args.wav)
    values = np.stack([s.values for s in specs])
    probs = M.predict(af.normalize(values, ckpt.norm_stats), ckpt.params, ckpt.config)
    names = ckpt.label_names or [str(k) for k in range(ckpt.config.class_count)]

    def row(p):
        return " ".join(f"{n}={v:.4f}" for n, v in zip(names, p))

    for i, p in enumerate(probs):
        print(f"clip {i}: {names[int(np.argmax(p))]}  {row(p)}")
    mean = probs.mean(axis=0)
    winner, _ = loop.aggregate_by_song(probs, [str(args.wav)] * len(probs))[str(args.wav)]
    print(f"mean: {names[int(np.argmax(mean))]}  {row(mean)}")
    print(f"majority vote: {names[winner]}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.reduced:
        config, sample = M.ModelConfig.reduced(), args.samples
    else:
        config, sample = M.ModelConfig(), args.samples or 500
    report = gradient_check(config, seed=args.seed, epsilon=args.eps, precision=args.precision,
                            sample=sample, tolerance=args.tolerance)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_DATA


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="prcnn", description="Parallel CNN + BGRU music genre classifier.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    s = sub.add_parser("preprocess", help="scan <root>/<genre>/*.wav, split by song, write shards")
    s.add_argument("--data", required=True, help="dataset root with one directory per genre")
    s.add_argument("--out", required=True, help="output shard stem; writes STEM.train.prcn and STEM.test.prcn")
    s.add_argument("--manifest", help="manifest path (default STEM.manifest)")
    s.add_argument("--split", type=float, default=0.9, help="training fraction per genre (default 0.9)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--window", choices=["none", "hann"], default="none", help="STFT window (default none)")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("synth", help="generate the synthetic tone corpus")
    s.add_argument("--out", required=True, help="output shard stem")
    s.add_argument("--classes", type=int, default=10)
    s.add_argument("--clips", type=int, default=40, help="clips per class")
    s.add_argument("--noise", type=float, default=0.05, help="uniform noise amplitude")
    s.add_argument("--split", type=float, default=0.8, help="training fraction per class (default 0.8)")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model and write a checkpoint plus metrics log")
    s.add_argument("--train", required=True, help="training shard")
    s.add_argument("--test", help="held-out shard to score after training")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--metrics", help="metrics log path (default OUT.metrics.jsonl)")
    s.add_argument("--manifest", help="manifest supplying genre names")
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    s.add_argument("--clip-norm", type=float, default=None, help="global gradient-norm clip (default off)")
    s.add_argument("--fusion", choices=["concat", "add"], default="concat")
    s.add_argument("--rnn-layers", type=int, choices=[1, 2], default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--deterministic", action="store_true", help="single-threaded, reproducible run")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="accuracy and confusion matrix on a shard")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--by-song", action="store_true", help="majority vote over each song's clips")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="genre probabilities for one WAV file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--wav", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    s.add_argument("--reduced", action="store_true", help="check every parameter of the small model")
    s.add_argument("--eps", type=float, default=1e-6)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--precision", choices=sorted(PRECISIONS), default="float64",
                   help="arithmetic of the finite-difference side (default float64)")
    s.add_argument("--samples", type=int, default=None,
                   help="check a seeded subset of this many coordinates (full model default 500)")
    s.add_argument("--tolerance", type=float, default=1e-5)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (PrcnnError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
