"""``ynet`` command line: synth, pretrain, train, eval, infer, score.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np

from . import __version__
from .config import PROFILES, ConfigError, RunConfig, resolve_config
from .data import (
    NO_AUGMENT,
    DatasetError,
    OnlineProbs,
    Sample,
    double_polyp_frames,
    generate_synthetic,
    load_manifest,
    preprocess,
    read_frame,
    to_batch,
    write_png,
)
from .evaluate import Box, DetectionCounts, ScoreReport, extract_detections, prf_scores, score_run
from .model import EncoderClassifier, ModelConfig, UNet, YNet, build_model
from .train import NumericError, fit, make_optimizer, pretrain_encoder
from .weights_io import CheckpointError, load_checkpoint, save_checkpoint

logger = logging.getLogger("ynet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

_FULL, _DESK = PROFILES["full"], PROFILES["desk"]

PROFILE_EPILOG = f"""\
profiles (--profile):
  full   input size {_FULL.input_size}, width scale {_FULL.width_scale:g}, batch {_FULL.batch_size}, eta {_FULL.optimizer.eta:g}
  desk   input size {_DESK.input_size}, width scale {_DESK.width_scale:g}, batch {_DESK.batch_size}, eta {_DESK.optimizer.eta:g}
flags override a --config JSON file, which overrides the profile."""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _both(field: str, fmt=lambda v: f"{v:g}") -> str:
    full, desk = _FULL, _DESK
    for part in field.split("."):
        full, desk = getattr(full, part), getattr(desk, part)
    return f"full default {fmt(full)}, desk default {fmt(desk)}"


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration")
    g.add_argument("--profile", choices=sorted(PROFILES), default="full", help="default set to start from (default full)")
    g.add_argument("--config", type=Path, help="JSON config file; unknown keys are rejected")
    g.add_argument("--seed", type=int, help="random seed (default 0)")
    g.add_argument("--data", dest="data_root", help="dataset root")
    g.add_argument("--out", dest="out_dir", help="output directory")
    g.add_argument("--variant", choices=["ynet", "unet_scratch", "unet_pretrained_encoder"], help="model variant (default ynet)")
    g.add_argument("--size", dest="input_size", type=int, help=f"input side in pixels ({_both('input_size', str)})")
    g.add_argument("--width", dest="width_scale", type=float, help=f"channel width multiplier ({_both('width_scale')})")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--batch-size", type=int, help=f"batch size ({_both('batch_size', str)})")
    g.add_argument("--eta", type=float, help=f"base learning rate ({_both('optimizer.eta')})")
    g.add_argument("--rho", type=float, help="RMSProp decay (default 0.9)")
    g.add_argument("--encoder1-scale", type=float, help="learning-rate scale of the pretrained encoder (default 0.01)")
    g.add_argument("--max-epochs", type=int, help=f"epoch budget ({_both('max_epochs', str)})")
    g.add_argument("--patience", type=int, help="early-stop patience in epochs (default 10)")
    g.add_argument("--lam", type=float, help="false-negative weight of the cross-entropy term (default 2)")
    g.add_argument("--dice-epsilon", type=float, help="dice smoothing (default 1)")
    g.add_argument("--no-augment", action="store_true", help="disable online augmentation and polyp-frame doubling")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ynet", description="Polyp segmentation and detection with a dual-encoder network.",
                     epilog=PROFILE_EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        return sub.add_parser(name, help=help_, description=help_, epilog=PROFILE_EPILOG,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    p = add("synth", "write a synthetic colonoscopy dataset")
    p.add_argument("--root", type=Path, required=True)
    p.add_argument("--count", type=int, default=200, help="train frames (default 200)")
    p.add_argument("--val-count", type=int, default=0)
    p.add_argument("--test-count", type=int, default=0)
    p.add_argument("--size", type=int, default=_DESK.input_size,
                   help=f"frame side (default {_DESK.input_size}, the desk size; full size {_FULL.input_size})")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--polyp-fraction", type=float, default=0.5)
    p.add_argument("--frames-per-video", type=int, default=10)

    p = add("pretrain", "train encoder one on the polyp present/absent proxy task")
    _add_run_flags(p)
    p.add_argument("--epochs", type=int, default=20, help="epoch budget (default 20)")
    p.add_argument("--pretrain-eta", type=float, default=3e-4, help="learning rate of the proxy task (default 0.0003)")
    p.add_argument("--pretrain-batch", type=int, default=8, help="batch size of the proxy task (default 8)")
    p.add_argument("--target-accuracy", type=float, default=None,
                   help="stop early once train accuracy reaches this (default: run every epoch)")
    p.add_argument("--checkpoint", type=Path, help="output .ynw (default <out>/encoder.ynw)")

    p = add("train", "train a segmentation model with early stopping on validation dice")
    _add_run_flags(p)
    _add_train_flags(p)
    p.add_argument("--pretrained", help="encoder checkpoint for encoder one")

    p = add("eval", "run a checkpoint on a split and write the detection report")
    _add_run_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--threshold", type=float, default=0.9)

    p = add("infer", "write probability masks and boxes for image files")
    _add_run_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("inputs", nargs="+", type=Path, help="image files or directories of .png/.jpg")
    p.add_argument("--threshold", type=float, default=0.9)

    p = add("score", "score a detection dump against ground truth, or raw counts")
    p.add_argument("--counts", help="TP,FP,FN; prints precision/recall/F1/F2 and exits")
    p.add_argument("--predictions", type=Path, help="detections .jsonl ({video, frame, boxes})")
    p.add_argument("--data", dest="data_root", type=Path, help="dataset root holding the ground truth")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", dest="out_dir", type=Path, help="write report.csv/report.json here")
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _run_config(args) -> RunConfig:
    flags = {k: getattr(args, k, None) for k in ("seed", "data_root", "out_dir", "variant", "input_size", "width_scale")}
    for key in ("batch_size", "max_epochs", "patience", "pretrained"):
        flags[key] = getattr(args, key, None)
    if getattr(args, "no_augment", False):
        flags["augment"] = False
    opt = {k: v for k, v in (("eta", getattr(args, "eta", None)), ("rho", getattr(args, "rho", None))) if v is not None}
    if getattr(args, "encoder1_scale", None) is not None:
        opt["c_map"] = {"encoder1": args.encoder1_scale, "encoder2": 1.0, "decoder": 1.0}
    if opt:
        flags["optimizer"] = opt
    loss = {k: v for k, v in (("lam", getattr(args, "lam", None)), ("epsilon", getattr(args, "dice_epsilon", None))) if v is not None}
    if loss:
        flags["loss"] = loss
    return resolve_config(args.profile, args.config, flags)


def _model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(input_size=cfg.input_size, width_scale=cfg.width_scale, variant=cfg.variant)


def _config_beside(checkpoint: Path, args) -> RunConfig:
    """Use the config saved next to a checkpoint unless one is given explicitly."""
    saved = checkpoint.parent / "config.json"
    if args.config is None and saved.exists():
        args.config = saved
    return _run_config(args)


def _load_model(cfg: RunConfig, checkpoint: Path):
    mcfg = _model_config(cfg)
    # weights come from the checkpoint, so skip the pretrained-transfer path
    model = YNet(mcfg, cfg.seed) if cfg.variant == "ynet" else UNet(mcfg, cfg.seed)
    state = load_checkpoint(checkpoint, {k: v.shape for k, v in model.state_dict().items()})
    model.load_state_dict(state, strict=False)
    return model


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    counts = {"val": args.val_count, "test": args.test_count}
    manifest = generate_synthetic(args.root, args.count, args.size, args.seed, args.polyp_fraction, counts,
                                  args.frames_per_video)
    print(f"wrote {manifest.num_frames()} frames in {len(manifest.videos)} videos to {args.root}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _run_config(args)
    manifest = load_manifest(cfg.data_root)
    samples = manifest.load_split("train", cfg.input_size)
    if not samples:
        raise DatasetError(f"{cfg.data_root}: train split is empty")
    clf = EncoderClassifier(_model_config(cfg), seed=cfg.seed)
    result = pretrain_encoder(clf, samples, args.epochs, args.pretrain_batch, args.pretrain_eta, cfg.seed,
                              args.target_accuracy)
    out = args.checkpoint or Path(cfg.out_dir) / "encoder.ynw"
    save_checkpoint(clf.parameters(), out)
    acc = result.accuracies[-1] if result.accuracies else float("nan")
    print(f"pretrain epochs={len(result.accuracies)} train_accuracy={acc:.4f} checkpoint={out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(cfg.data_root)
    train = manifest.load_split("train", cfg.input_size)
    val = manifest.load_split("val", cfg.input_size)
    if not train:
        raise DatasetError(f"{cfg.data_root}: train split is empty")
    if cfg.augment:
        train = double_polyp_frames(train, np.random.default_rng([cfg.seed, 0xA11]))
    pretrained = None
    if cfg.variant != "unet_scratch":
        pretrained = cfg.pretrained
    elif cfg.pretrained is not None:
        raise UsageError("unet_scratch does not take --pretrained")
    model = build_model(_model_config(cfg), pretrained, seed=cfg.seed)
    opt = make_optimizer(model, cfg.optimizer.eta, cfg.optimizer.rho, cfg.optimizer.eps, cfg.optimizer.c_map)
    for group, lr in sorted(opt.state.effective_lr().items()):
        print(f"effective_lr {group}={lr:g}")
    cfg.save(out / "config.json")
    result = fit(model, train, val, opt, cfg.loss, cfg.batch_size, cfg.max_epochs, cfg.patience, cfg.min_delta,
                 cfg.seed, OnlineProbs() if cfg.augment else NO_AUGMENT, out)
    print(f"best_val_dice={result.best_val_dice:.4f} best_epoch={result.best_epoch} epochs={len(result.rows)}")
    return EXIT_OK


def _write_report(report: ScoreReport, out: Optional[Path]) -> None:
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(report.to_csv())
        (out / "report.json").write_text(report.to_json() + "\n")
        (out / "detections.jsonl").write_text(report.detections_jsonl())
    row = report.row()
    print(" ".join(f"{k}={v}" for k, v in row.items()))


def cmd_eval(args) -> int:
    cfg = _config_beside(args.checkpoint, args)
    model = _load_model(cfg, args.checkpoint)
    samples = load_manifest(cfg.data_root).load_split(args.split, cfg.input_size)
    if not samples:
        raise DatasetError(f"{cfg.data_root}: {args.split} split is empty")
    x, _ = to_batch(samples)
    probs = model.predict(x)
    truth = [(s.video_id, s.frame_index, s.mask) for s in samples]
    preds = {(s.video_id, s.frame_index): p for s, p in zip(samples, probs)}
    report = score_run(truth, preds, args.threshold, method=cfg.variant)
    _write_report(report, Path(cfg.out_dir))
    return EXIT_OK


def _image_files(inputs: Sequence[Path]) -> list[Path]:
    files = []
    for path in inputs:
        if path.is_dir():
            files += sorted(p for p in path.rglob("*") if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        else:
            files.append(path)
    return files


def cmd_infer(args) -> int:
    cfg = _config_beside(args.checkpoint, args)
    model = _load_model(cfg, args.checkpoint)
    out = Path(cfg.out_dir)
    records, failures = [], 0
    files = _image_files(args.inputs)
    for path in files:
        try:
            frame = read_frame(path)
        except (OSError, ValueError) as exc:
            logger.error("skipping unreadable image %s: %s", path, exc)
            failures += 1
            continue
        h, w = frame.shape[:2]
        sample = preprocess(Sample(frame, np.zeros((h, w), np.uint8), path.stem), cfg.input_size)
        prob = model.predict(to_batch([sample])[0])[0]
        y0, x0, y1, x1 = sample.crop_box
        full = np.zeros((h, w), np.float32)
        if not sample.flagged:
            full[y0:y1, x0:x1] = cv2.resize(prob, (x1 - x0, y1 - y0), interpolation=cv2.INTER_LINEAR)
        write_png(out / f"{path.stem}_mask.png", np.round(np.clip(full, 0, 1) * 255).astype(np.uint8))
        boxes, _ = extract_detections(full, args.threshold)
        records.append({"image": str(path), "boxes": [list(b) for b in boxes]})
    out.mkdir(parents=True, exist_ok=True)
    (out / "detections.json").write_text(json.dumps(records, indent=1, sort_keys=True) + "\n")
    if files and failures == len(files):
        raise DatasetError("no input image could be read")
    print(f"wrote {len(records)} masks to {out}")
    return EXIT_OK


def _read_dump(path: Path) -> dict:
    preds = {}
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            preds[(str(rec["video"]), int(rec["frame"]))] = [Box(*b) for b in rec["boxes"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise DatasetError(f"{path}:{n}: malformed detection record ({exc})") from None
    return preds


def cmd_score(args) -> int:
    if args.counts:
        try:
            tp, fp, fn = (int(v) for v in args.counts.split(","))
            counts = DetectionCounts(tp, fp, fn)
        except ValueError as exc:
            raise UsageError(f"--counts expects TP,FP,FN non-negative integers ({exc})") from None
        s = prf_scores(counts)
        print(f"precision={s.precision:.1f} recall={s.recall:.1f} f1={s.f1:.1f} f2={s.f2:.1f}")
        return EXIT_OK
    if args.predictions is None or args.data_root is None:
        raise UsageError("score needs --counts, or both --predictions and --data")
    if not args.predictions.exists():
        raise DatasetError(f"{args.predictions} does not exist")
    preds = _read_dump(args.predictions)
    samples = list(load_manifest(args.data_root).iter_samples(args.split))
    keys = {(s.video_id, s.frame_index) for s in samples}
    stray = sorted(set(preds) - keys)
    if stray:
        raise DatasetError(f"predictions for frames absent from the {args.split} split, first {stray[0]}")
    report = score_run(((s.video_id, s.frame_index, s.mask) for s in samples), preds)
    _write_report(report, args.out_dir)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "score": cmd_score,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"ynet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"ynet {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"ynet {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
