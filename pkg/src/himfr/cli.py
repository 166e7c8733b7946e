"""Command-line interface.

Exit codes: 0 success, 1 usage/configuration error, 2 data error, 3 checkpoint error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import reports
from .checkpoint import ModelRegistry
from .detector import DetectorTrainConfig, build_detector, load_detector, save_detector, train_detector
from .errors import CheckpointError, ConfigurationError, HimfrError
from .imaging import (
    MaskedPair,
    MaskGeometry,
    composite,
    counterpart_paths,
    load_image,
    load_mask,
    make_masked_dataset,
    read_manifest,
    resize,
    resize_mask,
    scan_dataset,
    split_dataset,
    write_manifest,
)
from .inpainter import InpaintTrainConfig, load_inpainter, save_inpainter, train_inpainter
from .metrics import classification_report, one_vs_rest_roc, psnr, roc_auc, ssim
from .pipeline import BatchItem, Pipeline, PipelineConfig, default_seed, run_batch
from .recognizer import RecognizerConfig, build_recognizer, evaluate_recognizer, load_recognizer, save_recognizer, train_recognizer
from .synthetic import write_face_tree

log = logging.getLogger("himfr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ data helpers


def manifest_path(root, manifest=None) -> Path:
    root = Path(root)
    return Path(manifest) if manifest else root.with_name(root.name + "_split.csv")


def load_split(root, split: str, manifest=None):
    splits = read_manifest(manifest_path(root, manifest))
    if split not in splits:
        raise HimfrError(f"manifest has no {split!r} split")
    return splits[split]


def masked_pair_for(path, root, size: int | None = None) -> MaskedPair:
    original = load_image(path)
    masked_path, mask_path = counterpart_paths(path, root)
    masked = load_image(masked_path)
    mask = load_mask(mask_path)
    if size is not None and original.shape[:2] != (size, size):
        original = resize(original, size)
        mask = resize_mask(mask, size)
        masked = composite(original, resize(masked, size), mask)
    hidden = np.where(mask[:, :, None], original, np.float32(0.0))
    return MaskedPair(masked, mask, hidden, original)


def detector_samples(root, idx):
    images, labels = [], []
    for s in idx.samples:
        images.append(load_image(s.path))
        labels.append(0)
        images.append(load_image(counterpart_paths(s.path, root)[0]))
        labels.append(1)
    return images, labels


def _register(args, stage, path):
    if getattr(args, "registry", None):
        ModelRegistry(args.registry).register(stage, path)


# ---------------------------------------------------------------------- commands


def cmd_make_toy_dataset(args):
    n = write_face_tree(args.out, args.classes, args.per_class, args.size, args.seed)
    print(f"wrote {n} images under {args.out}")


def cmd_make_masked_dataset(args):
    idx = scan_dataset(args.root)
    geom = MaskGeometry(jitter=args.jitter)
    n = make_masked_dataset(args.root, geom, seed=args.seed, paths=[s.path for s in idx.samples])
    train, test = split_dataset(idx, args.ratio, args.seed)
    out = manifest_path(args.root, args.manifest)
    write_manifest(out, {"train": train, "test": test})
    print(f"wrote {n} masked images; split {len(train)}/{len(test)} -> {out}")


def cmd_train_detector(args):
    idx = load_split(args.root, "train", args.manifest)
    images, labels = detector_samples(args.root, idx)
    cfg = DetectorTrainConfig(args.epochs, args.batch_size, args.optimizer, args.lr, args.input_size, args.seed)
    model = build_detector(args.backbone, (args.hidden, 2), input_size=args.input_size, seed=args.seed)
    model, history = train_detector(model, images, labels, cfg)
    save_detector(model, args.out)
    _register(args, "detector", args.out)
    print(json.dumps({"loss": history}))


def cmd_eval_detector(args):
    model = load_detector(args.checkpoint)
    idx = load_split(args.root, "test", args.manifest)
    images, labels = detector_samples(args.root, idx)
    probs = model.predict_proba(images)
    preds = (probs > args.threshold).astype(int)
    rep = classification_report(preds, labels, [0, 1])
    curve = roc_auc(probs, labels)
    rows = rep.rows() + [("auc", "masked", curve.auc)]
    out = Path(args.out_dir)
    reports.write_report(out / "detector_metrics", rows, {"auc_exact": curve.auc})
    reports.write_roc_csv(out / "detector_roc.csv", curve)
    reports.plot_roc(out / "detector_roc.png", {"masked": curve}, "Mask detector ROC")
    print(rep.table())
    print(f"auc {curve.auc:.4f}  (full-scale reference accuracy {reports.REFERENCE_TARGETS['detector_accuracy_celeba']:.4f})")


def cmd_train_inpainter(args):
    idx = load_split(args.root, "train", args.manifest)
    pairs = [masked_pair_for(s.path, args.root, args.image_size) for s in idx.samples]
    cfg = InpaintTrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        image_size=args.image_size,
        latent_dim=args.latent_dim,
        seed=args.seed,
    )
    inp, history = train_inpainter(pairs, cfg)
    save_inpainter(inp, args.out)
    _register(args, "inpainter", args.out)
    print(json.dumps({k: v[-1] for k, v in history.items()}))


def cmd_eval_inpainter(args):
    inp = load_inpainter(args.checkpoint)
    size = inp.config.image_size
    idx = load_split(args.root, "test", args.manifest)
    ps, ss, hole, base = [], [], [], []
    grid_rows = []
    for i, s in enumerate(idx.samples):
        pair = masked_pair_for(s.path, args.root, size)
        cands = inp.generate_candidates(pair.masked_image, pair.mask, args.k, args.seed)
        best = min(cands, key=lambda c: (-c.score, c.latent_seed)).image
        ps.append(psnr(best, pair.ground_truth))
        ss.append(ssim(best, pair.ground_truth))
        if pair.mask.any():
            hole.append(psnr(best, pair.ground_truth, mask=pair.mask))
            base.append(psnr(pair.masked_image, pair.ground_truth, mask=pair.mask))
        if i < args.grid_rows:
            grid_rows.append([pair.masked_image] + [c.image for c in cands] + [pair.ground_truth])
    finite = lambda v: [x for x in v if np.isfinite(x)] or [float("inf")]  # noqa: E731
    rows = [
        ("psnr", "all", float(np.mean(finite(ps)))),
        ("ssim", "all", float(np.mean(ss))),
        ("psnr_masked_region", "all", float(np.mean(finite(hole))) if hole else float("nan")),
        ("psnr_masked_region_baseline", "all", float(np.mean(finite(base))) if base else float("nan")),
    ]
    out = Path(args.out_dir)
    reports.write_report(out / "inpainter_metrics", rows)
    if grid_rows:
        reports.save_grid(out / "inpainter_candidates.png", grid_rows)
    for name, _, v in rows:
        print(f"{name:>28} {v:.4f}")
    t = reports.REFERENCE_TARGETS
    print(f"full-scale reference: psnr {t['inpainter_psnr_db']} ssim {t['inpainter_ssim']}")


def _recognizer_items(root, idx, mixed: bool):
    items = [BatchItem(s.path, truth=s.label, known_clean=True) for s in idx.samples]
    if mixed:
        for s in idx.samples:
            masked_path, mask_path = counterpart_paths(s.path, root)
            items.append(BatchItem(str(masked_path), mask_path=str(mask_path), truth=s.label))
    return items


def cmd_train_recognizer(args):
    idx = load_split(args.root, "train", args.manifest)
    images = [load_image(s.path) for s in idx.samples]
    cfg = RecognizerConfig(
        num_classes=len(idx.class_names),
        layers=args.layers,
        heads=args.heads,
        dim=args.dim,
        patch=args.patch,
        stride=args.stride,
        grid=args.grid,
        backbone=args.backbone,
        input_size=args.input_size,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        augment=not args.no_augment,
        seed=args.seed,
        stop_at_accuracy=args.stop_at_accuracy,
        class_names=list(idx.class_names),
    )
    model = build_recognizer(cfg)
    model, history = train_recognizer(model, images, idx.labels, cfg)
    save_recognizer(model, args.out)
    _register(args, "recognizer", args.out)
    print(json.dumps({"epochs": len(history["loss"]), "train_accuracy": history["accuracy"][-1]}))


def cmd_eval_recognizer(args):
    model = load_recognizer(args.checkpoint)
    idx = load_split(args.root, "test", args.manifest)
    names = model.config.class_names or [str(i) for i in range(model.config.num_classes)]
    if args.mixed:
        cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
        cfg = _apply_overrides(cfg, args)
        pipe = Pipeline(load_detector(cfg.detector), load_inpainter(cfg.inpainter), model, cfg, names)
        report = run_batch(pipe, _recognizer_items(args.root, idx, True))
        failed = [r for r in report.records if not r.ok]
        if failed:
            raise HimfrError(f"{len(failed)} images failed in the pipeline, first: {failed[0].error}")
        probs = np.array([r.probabilities for r in report.records])
        labels = np.array([r.truth for r in report.records])
        preds = probs.argmax(axis=1)
        rep = classification_report(preds, labels, list(range(model.config.num_classes)))
        curves = one_vs_rest_roc(probs, labels, model.config.num_classes)
    else:
        images = [load_image(s.path) for s in idx.samples]
        ev = evaluate_recognizer(model, images, idx.labels)
        rep, curves = ev.report, ev.roc
    rows = rep.rows()
    exact = {}
    for c, curve in enumerate(curves):
        if curve is not None:
            rows.append(("auc", str(c), curve.auc))
            exact[str(c)] = curve.auc
    out = Path(args.out_dir)
    reports.write_report(out / "recognizer_metrics", rows, {"auc_exact": exact, "class_names": names})
    plotted = {}
    for c, curve in enumerate(curves):
        if curve is not None:
            reports.write_roc_csv(out / f"recognizer_roc_class{c}.csv", curve)
            plotted[names[c]] = curve
    if plotted:
        reports.plot_roc(out / "recognizer_roc.png", plotted, "Recognizer one-vs-rest ROC")
    print(rep.table())
    t = reports.REFERENCE_TARGETS
    key = "recognizer_accuracy_mixed" if args.mixed else "recognizer_accuracy_unmasked"
    print(f"full-scale reference accuracy: {t[key]:.2f}")


def _apply_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    for key in ("detector", "inpainter", "recognizer", "k", "seed", "threshold", "segmentation"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    cfg.__post_init__()
    return cfg


def cmd_infer(args):
    cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    cfg = _apply_overrides(cfg, args)
    items = []
    for p in args.image or []:
        if not Path(p).is_file():
            raise FileNotFoundError(p)
        items.append(BatchItem(p, mask_path=args.mask))
    if args.dir:
        items += [BatchItem(s.path) for s in scan_dataset(args.dir).samples]
    if not items:
        raise UsageError("give --image or --dir")
    pipe = Pipeline.load(cfg)
    report = run_batch(pipe, items, workers=args.workers, all_candidates=args.all_candidates)
    payload = report.to_dict()
    if args.out:
        reports.write_json(args.out, payload)
    print(json.dumps(reports._jsonable(payload), indent=2, sort_keys=True))


def cmd_report(args):
    if not (args.metrics or args.roc):
        raise UsageError("give --metrics and/or --roc")
    if args.metrics:
        path = Path(args.metrics)
        rows = reports.read_metric_csv(path) if path.suffix == ".csv" else [
            (m, c, float(v)) for m, per in reports.read_json(path)["metrics"].items() for c, v in per.items()
        ]
        for m, c, v in rows:
            print(f"{m:>30} {c:>14} {reports.format_value(v)}")
        print("full-scale reference targets:")
        for k, v in reports.REFERENCE_TARGETS.items():
            print(f"  {k}: {v}")
    if args.roc:
        auc = reports.reintegrate_roc(args.roc)
        print(f"re-integrated auc {auc!r}")
        if args.expect_auc is not None and abs(auc - args.expect_auc) > 1e-9:
            raise HimfrError(f"re-integrated AUC {auc!r} differs from expected {args.expect_auc!r}")


# ------------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    seed = default_seed()
    p = _Parser(prog="himfr", description="Masked face recognition: detect, inpaint, recognize.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_args(sp, manifest=True):
        sp.add_argument("--root", required=True, help="dataset root <root>/<class>/<image>")
        if manifest:
            sp.add_argument("--manifest", help="split manifest (default <root>_split.csv)")
        sp.add_argument("--seed", type=int, default=seed)

    sp = sub.add_parser("make-toy-dataset", help="render synthetic identities")
    sp.add_argument("--out", required=True)
    sp.add_argument("--classes", type=int, default=5)
    sp.add_argument("--per-class", type=int, default=20)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=seed)
    sp.set_defaults(func=cmd_make_toy_dataset)

    sp = sub.add_parser("make-masked-dataset", help="synthesize masks and write the split manifest")
    data_args(sp)
    sp.add_argument("--ratio", type=float, default=0.8)
    sp.add_argument("--jitter", type=float, default=0.0)
    sp.set_defaults(func=cmd_make_masked_dataset)

    sp = sub.add_parser("train-detector")
    data_args(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--registry")
    sp.add_argument("--backbone", default="toy:64")
    sp.add_argument("--hidden", type=int, default=128)
    sp.add_argument("--epochs", type=int, default=5)
    sp.add_argument("--batch-size", type=int, default=16)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--optimizer", choices=["radam", "adam"], default="radam")
    sp.add_argument("--input-size", type=int, default=224)
    sp.set_defaults(func=cmd_train_detector)

    sp = sub.add_parser("eval-detector")
    data_args(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.set_defaults(func=cmd_eval_detector)

    sp = sub.add_parser("train-inpainter")
    data_args(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--registry")
    sp.add_argument("--epochs", type=int, default=150)
    sp.add_argument("--batch-size", type=int, default=8)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--image-size", type=int, default=256)
    sp.add_argument("--latent-dim", type=int, default=64)
    sp.set_defaults(func=cmd_train_inpainter)

    sp = sub.add_parser("eval-inpainter")
    data_args(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--k", type=int, default=3)
    sp.add_argument("--grid-rows", type=int, default=4)
    sp.set_defaults(func=cmd_eval_inpainter)

    sp = sub.add_parser("train-recognizer")
    data_args(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--registry")
    sp.add_argument("--backbone", default="toy:64")
    sp.add_argument("--layers", type=int, default=2)
    sp.add_argument("--heads", type=int, default=8)
    sp.add_argument("--dim", type=int, default=64)
    sp.add_argument("--patch", type=int, default=2)
    sp.add_argument("--stride", type=int, default=1)
    sp.add_argument("--grid", type=int, default=14)
    sp.add_argument("--input-size", type=int, default=224)
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--batch-size", type=int, default=2)
    sp.add_argument("--lr", type=float, default=3e-4)
    sp.add_argument("--no-augment", action="store_true")
    sp.add_argument("--stop-at-accuracy", type=float)
    sp.set_defaults(func=cmd_train_recognizer)

    sp = sub.add_parser("eval-recognizer")
    data_args(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--mixed", action="store_true", help="also route masked test faces through the full pipeline")
    sp.add_argument("--config", help="pipeline config file (used with --mixed)")
    sp.add_argument("--detector")
    sp.add_argument("--inpainter")
    sp.add_argument("--k", type=int)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--segmentation", choices=["ground_truth", "color_threshold"])
    sp.set_defaults(func=cmd_eval_recognizer)

    sp = sub.add_parser("infer")
    sp.add_argument("--image", action="append", help="input image (repeatable)")
    sp.add_argument("--mask", help="stored occlusion mask for ground_truth segmentation")
    sp.add_argument("--dir", help="run every image under a <dir>/<class>/<image> tree")
    sp.add_argument("--config", help="pipeline config file")
    sp.add_argument("--detector")
    sp.add_argument("--inpainter")
    sp.add_argument("--recognizer")
    sp.add_argument("--k", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--segmentation", choices=["ground_truth", "color_threshold"])
    sp.add_argument("--all-candidates", action="store_true", help="also report a prediction per inpainting candidate")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out", help="write the run report JSON here")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("report")
    sp.add_argument("--metrics", help="metric report (.csv or .json) to print")
    sp.add_argument("--roc", help="ROC CSV to re-integrate")
    sp.add_argument("--expect-auc", type=float, help="fail unless the re-integrated AUC matches within 1e-9")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        parser = build_parser()
    except ConfigurationError as exc:
        print(f"himfr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"himfr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"himfr: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except FileNotFoundError as exc:
        print(f"himfr: data error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_DATA
    except (HimfrError, ValueError, OSError) as exc:
        print(f"himfr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
