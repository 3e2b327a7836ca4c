"""``s3shift`` command line: feature extraction, training, evaluation, export, reports."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, audio
from .cost import model_report
from .datasets import (DataError, FeatureDataset, LabelMap, build_label_map, load_manifest,
                       synth_dataset)
from .engine import ExportError, ShiftEngine
from .network import ModelConfig, ResNet
from .quantizers import parse_mode
from .trainer import (CheckpointError, NumericError, TrainConfig, confusion_matrix, history_csv,
                      load_checkpoint, predict_dataset, save_checkpoint, train)

log = logging.getLogger("s3shift")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SPLITS = ("train", "valid", "test")


class UsageError(Exception):
    pass


def write_run_manifest(out_dir: Path, command: str, args: argparse.Namespace, inputs: list, outputs: list,
                       started: float) -> Path:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": command, "config": cfg, "seed": cfg.get("seed"), "tool_version": __version__,
        "inputs": [str(p) for p in inputs], "outputs": [str(p) for p in outputs],
        "wall_time_s": round(time.time() - started, 3),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{command}.run.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------
# feature/label file helpers


def write_labels_csv(path: Path, ids: list[str], labels: np.ndarray, names: list[str] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "name"])
        for i, lab in zip(ids, labels):
            w.writerow([i, int(lab), names[lab] if names else ""])


def read_split(features: Path, split: str) -> FeatureDataset:
    archive = features / f"{split}.s3ft"
    labels_path = features / f"{split}.labels.csv"
    if not archive.exists() or not labels_path.exists():
        raise DataError(f"missing {archive} or {labels_path}")
    records = audio.read_feature_archive(archive)
    with open(labels_path, newline="") as fh:
        by_id = {row["id"]: int(row["label"]) for row in csv.DictReader(fh)}
    try:
        labels = [by_id[i] for i, _ in records]
    except KeyError as exc:
        raise DataError(f"{labels_path} has no label for utterance {exc}") from None
    if not records:
        raise DataError(f"{archive} contains no utterances")
    return FeatureDataset([f for _, f in records], np.array(labels), [i for i, _ in records])


def write_split(features: Path, split: str, data: FeatureDataset, names=None) -> list[Path]:
    features.mkdir(parents=True, exist_ok=True)
    archive, labels = features / f"{split}.s3ft", features / f"{split}.labels.csv"
    audio.write_feature_archive(archive, list(zip(data.ids, data.features)))
    write_labels_csv(labels, data.ids, data.labels, names)
    return [archive, labels]


def synthetic_splits(args):
    return synth_dataset(args.classes, args.per_class, args.seed, args.noise, args.frames)


# --------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> int:
    started = time.time()
    d = synthetic_splits(args)
    out = Path(args.out)
    outputs = []
    for split, data in zip(SPLITS, (d.train, d.val, d.test)):
        outputs += write_split(out, split, data)
    write_run_manifest(out, "synth-data", args, [], outputs, started)
    print(f"wrote {len(d.train)}/{len(d.val)}/{len(d.test)} synthetic items to {out}")
    return EXIT_OK


def cmd_fit_cmvn(args) -> int:
    started = time.time()
    records = load_manifest(args.manifest, args.audio_root)
    corpus = [audio.logmel_features(audio.read_wav(r.path)) for r in records]
    stats = audio.cmvn_fit(corpus, corpus_id=Path(args.manifest).name)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    audio.write_cmvn(out, stats)
    write_run_manifest(out.parent, "fit-cmvn", args, [args.manifest], [out], started)
    print(f"CMVN stats over {stats.count} frames written to {out}")
    return EXIT_OK


def cmd_extract_features(args) -> int:
    started = time.time()
    records = load_manifest(args.manifest, args.audio_root)
    stats = audio.read_cmvn(args.cmvn) if args.cmvn else None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    outputs = [out]
    if args.label_map:
        lm = LabelMap.from_json(Path(args.label_map).read_text())
    else:
        lm = build_label_map(records, check_fsc=True)
        lm_path = out.with_suffix(".labelmap.json")
        lm_path.write_text(lm.to_json() + "\n")
        outputs.append(lm_path)
    ids = [Path(r.path).stem for r in records]
    feats = [audio.extract_features(audio.read_wav(r.path), stats) for r in records]
    audio.write_feature_archive(out, list(zip(ids, feats)))
    labels_path = out.with_suffix(".labels.csv")
    write_labels_csv(labels_path, ids, np.array([lm.intent_index(r) for r in records]), lm.intents)
    outputs.append(labels_path)
    write_run_manifest(out.parent, "extract-features", args, [args.manifest, args.cmvn], outputs, started)
    print(f"extracted {len(feats)} utterances to {out}")
    return EXIT_OK


def _load_train_data(args):
    if args.synthetic:
        d = synthetic_splits(args)
        return d.train, d.val, d.test, d.classes
    if not args.features:
        raise UsageError("train needs --synthetic or --features DIR")
    feats = Path(args.features)
    tr, va = read_split(feats, "train"), read_split(feats, "valid")
    te = read_split(feats, "test") if (feats / "test.s3ft").exists() else None
    n_classes = int(max(tr.labels.max(), va.labels.max())) + 1
    return tr, va, te, max(n_classes, 2)


def _t_fixed(args) -> int:
    if args.t_fixed is not None:
        return args.t_fixed
    return args.frames if args.synthetic else 128


def cmd_train(args) -> int:
    started = time.time()
    train_set, val_set, _, n_classes = _load_train_data(args)
    model_cfg = ModelConfig(arch=args.arch, n_classes=n_classes, mode=args.mode,
                            quantize_first=not args.no_quantize_first, quantize_last=not args.no_quantize_last)
    train_cfg = TrainConfig(batch_size=args.batch, epochs=args.epochs, lr=args.lr, eta_min=args.eta_min,
                            momentum=args.momentum, lambda_sparse=args.lambda_sparse, seed=args.seed,
                            mode=args.mode, optimizer=args.optimizer, t_fixed=_t_fixed(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = ResNet(model_cfg, seed=args.seed)
    resume = resume_best = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        if resume.model_config != model_cfg.to_dict():
            raise UsageError("resume checkpoint was trained with a different model configuration")
        if resume.train_config != train_cfg.to_dict():
            raise UsageError("resume checkpoint was trained with a different training configuration")
        best_path = Path(args.resume).with_name("best.s3ck")
        resume_best = load_checkpoint(best_path) if best_path.exists() else None

    def persist(epoch, last):
        save_checkpoint(last, out / "last.s3ck")

    best, history = train(model, train_set, val_set, train_cfg, resume=resume, resume_best=resume_best,
                          on_epoch=persist, stop_after=args.stop_after)
    save_checkpoint(best, out / "best.s3ck")
    (out / "history.csv").write_text(history_csv(history))
    outputs = [out / "best.s3ck", out / "last.s3ck", out / "history.csv"]
    write_run_manifest(out, "train", args, [args.features] if args.features else [], outputs, started)
    print(f"best epoch {best.best_epoch} val_acc {best.best_val_acc:.4f}; final train_loss "
          f"{history[-1]['train_loss']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.time()
    ck = load_checkpoint(args.checkpoint)
    if args.synthetic:
        d = synthetic_splits(args)
        data = {"train": d.train, "valid": d.val, "test": d.test}[args.split]
    elif args.features:
        data = read_split(Path(args.features), args.split)
    else:
        raise UsageError("eval needs --synthetic or --features DIR")
    if len(data) == 0:
        raise DataError("evaluation set is empty")
    n_classes = ck.model_config["n_classes"]
    if data.labels.max() >= n_classes:
        raise UsageError(f"dataset has labels >= {n_classes}; checkpoint/architecture mismatch")
    model = ck.build_model()
    t_fixed = args.t_fixed if args.t_fixed is not None else ck.train_config["t_fixed"]
    if data.features[0].shape[1] != 400:
        raise UsageError("feature width does not match the model input (400)")
    if args.integer:
        engine = ShiftEngine.from_model(model)
        from .datasets import stack_batch
        preds = np.concatenate([engine.predict(stack_batch(data.features[i : i + 64], t_fixed))
                                for i in range(0, len(data), 64)])
    else:
        preds = predict_dataset(model, data, t_fixed)
    acc = float(np.mean(preds == data.labels))
    cm = confusion_matrix(data.labels, preds, n_classes)
    print(f"accuracy {acc:.4f}")
    report = {"accuracy": acc, "n": len(data), "split": args.split, "integer_path": bool(args.integer),
              "confusion": cm.tolist(), "per_class_counts": cm.sum(axis=1).tolist()}
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".eval.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2) + "\n")
    write_run_manifest(out.parent, "eval", args, [args.checkpoint], [out], started)
    return EXIT_OK


def cmd_quantize_export(args) -> int:
    started = time.time()
    ck = load_checkpoint(args.checkpoint)
    engine = ShiftEngine.from_model(ck.build_model())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    engine.save(out)
    write_run_manifest(out.parent, "quantize-export", args, [args.checkpoint], [out], started)
    print(f"exported {ck.model_config['mode']} model ({engine.logical_bits} bits/weight) to {out}")
    return EXIT_OK


def cmd_cost_report(args) -> int:
    started = time.time()
    cfg = ModelConfig(arch=args.arch, n_classes=args.classes, mode=args.mode,
                      quantize_first=not args.no_quantize_first, quantize_last=not args.no_quantize_last)
    report = model_report(cfg, (args.t_fixed or 128, 400))
    print(report.to_text())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.to_json() + "\n")
        write_run_manifest(out.parent, "cost-report", args, [], [out], started)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import format_results, run_selftest

    results = run_selftest(corrupt_decode=args.corrupt_decode)
    print(format_results(results))
    failed = [r.name for r in results if not r.passed]
    print("all suites passed" if not failed else f"FAILED: {', '.join(failed)}")
    return EXIT_OK if not failed else EXIT_NUMERIC


# --------------------------------------------------------------------------
# argument parsing


def _mode(value: str) -> str:
    try:
        parse_mode(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return value.lower()


def _add_model_flags(p, mode_default="s3"):
    p.add_argument("--arch", choices=("resnet18", "toy"), default="toy")
    p.add_argument("--mode", type=_mode, default=mode_default,
                   help="fp32, q2/q3/q4/q8/q16, d2-d4 or s2-s4 (bits implied by the mode)")
    p.add_argument("--no-quantize-first", action="store_true", help="keep the stem conv in fp32")
    p.add_argument("--no-quantize-last", action="store_true", help="keep the classifier in fp32")


def _add_synth_flags(p):
    p.add_argument("--synthetic", action="store_true", help="use the synthetic band-energy task")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--frames", type=int, default=8, help="synthetic map height (stacked frames)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="s3shift", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write the synthetic dataset as S3FT archives")
    _add_synth_flags(p)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("fit-cmvn", help="global CMVN statistics over a training manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--audio-root")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_cmvn)

    p = sub.add_parser("extract-features", help="manifest -> stacked log-mel S3FT archive + labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--audio-root")
    p.add_argument("--cmvn", help="S3CM stats from fit-cmvn (omit to skip normalization)")
    p.add_argument("--label-map", help="label map JSON; built from the manifest when omitted")
    p.add_argument("--out", required=True, help="output .s3ft path, e.g. feats/train.s3ft")
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("train", help="train a model and keep the best-validation checkpoint")
    _add_model_flags(p)
    _add_synth_flags(p)
    p.add_argument("--features", help="directory with train/valid(/test).s3ft and .labels.csv")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--eta-min", type=float, default=0.0)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--lambda-sparse", type=float, default=1e-4)
    p.add_argument("--optimizer", choices=("auto", "sgd", "adam"), default="auto")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t-fixed", type=int, default=None)
    p.add_argument("--resume", help="last.s3ck to continue from")
    p.add_argument("--stop-after", type=int, default=None,
                   help="stop once this many epochs are done (schedule still spans --epochs)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint")
    _add_synth_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--seed", type=int, default=7, help="synthetic data seed")
    p.add_argument("--t-fixed", type=int, default=None)
    p.add_argument("--integer", action="store_true", help="run the integer shift path")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("quantize-export", help="write an S3MX shift-model file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize_export)

    p = sub.add_parser("cost-report", help="per-layer op counts and weight memory")
    _add_model_flags(p, mode_default="s3")
    p.add_argument("--classes", type=int, default=15)
    p.add_argument("--t-fixed", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_cost_report)

    p = sub.add_parser("selftest", help="run the built-in oracle suites")
    p.add_argument("--corrupt-decode", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("S3_NUM_THREADS")
    limiter = None
    if threads:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(int(threads))
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError, OverflowError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, ExportError, audio.WavFormatError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
