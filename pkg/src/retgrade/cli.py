"""Command-line surface: synth | preprocess | split | train | evaluate |
predict. Every subcommand is reproducible from its config plus seed, and
failures exit with a class-specific code (2 config, 3 I/O, 4 numeric,
5 checkpoint/manifest incompatibility)."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import report
from .config import ExperimentConfig, apply_overrides, load_config
from .coral import coral_decode
from .data import Manifest, load_manifest, save_manifest, stratified_split
from .errors import (CheckpointError, ConfigError, ImageIOError, InvalidInputError,
                     ManifestError, NumericError, RetgradeError, ShapeError)
from .imgproc import read_image, to_input_tensor
from .model import DualBranchModel
from .pipeline import (choose_reference, preproc_from_hyper, preproc_hyper, prepare_reference,
                       preprocess_image, preprocess_to_dataset, preprocess_to_tree)
from .synth import DomainShift, SynthConfig, apply_domain_shift, generate_corpus
from .train import (evaluate_model, fit, load_checkpoint, load_processed, model_from_checkpoint,
                    norm_from_hyper, save_checkpoint, write_history_csv)

logger = logging.getLogger("retgrade")

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5


def _load_effective_config(args, **overrides) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        overrides.setdefault("seed", args.seed)
    if getattr(args, "out", None) is not None:
        overrides.setdefault("out_dir", args.out)
    return apply_overrides(cfg, overrides)


def _parse_blob_ranges(text: str) -> tuple[tuple[int, int], ...]:
    try:
        pairs = []
        for chunk in text.split(","):
            lo, _, hi = chunk.partition("-")
            pairs.append((int(lo), int(hi)))
        return tuple(pairs)
    except ValueError as e:
        raise ConfigError(f"bad blob range spec {text!r}: {e}") from e


def _parse_gain(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError(f"gain must be three comma-separated values, got {text!r}")
    return (float(parts[0]), float(parts[1]), float(parts[2]))


def _load_checkpoint_model(path):
    try:
        ck = load_checkpoint(path)
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return ck, model_from_checkpoint(ck)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out_dir = getattr(args, "out", None)
    if not out_dir:
        raise ConfigError("synth requires --out")
    seed = getattr(args, "seed", None)
    if args.shift_from:
        shift = DomainShift(gain=_parse_gain(args.gain), vignette=args.vignette,
                            blur_sigma=args.blur)
        cfg = SynthConfig(shift=shift, seed=seed or 0)
        manifest = load_manifest(args.shift_from)
        out = apply_domain_shift(manifest, cfg, out_dir)
        logger.info("wrote %d shifted images to %s", len(out), out_dir)
        return 0
    cfg = SynthConfig(
        n_per_grade=args.n_per_grade,
        image_size=args.image_size,
        blob_count_ranges=_parse_blob_ranges(args.blob_ranges),
        seed=seed if seed is not None else 0,
    )
    manifest = generate_corpus(cfg, out_dir)
    logger.info("wrote %d images to %s", len(manifest), out_dir)
    return 0


def cmd_preprocess(args) -> int:
    cfg = _load_effective_config(
        args, size0=args.size0, size3=args.size3, reference=args.reference,
        reference_domain=args.reference_domain)
    manifest = load_manifest(args.manifest)
    reference = None
    if not args.no_hist_match:
        ref_path = choose_reference(manifest, cfg.reference or None, cfg.reference_domain)
        if ref_path is not None:
            reference = prepare_reference(ref_path, cfg.preprocess_params())
            logger.info("histogram-matching reference: %s", ref_path)
    out_dir = Path(cfg.out_dir)
    processed, first_stages = preprocess_to_tree(
        manifest, cfg.preprocess_params(), out_dir, reference,
        cfg.reference_domain, match=not args.no_hist_match)
    report.plot_contact_sheet(first_stages, out_dir / "contact_sheet.png")
    logger.info("preprocessed %d records into %s", len(processed), out_dir)
    return 0


def cmd_split(args) -> int:
    cfg = _load_effective_config(args, val_fraction=args.val_fraction)
    manifest = load_manifest(args.manifest)
    train_m, val_m = stratified_split(manifest, cfg.val_fraction, cfg.seed)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_manifest(train_m, out_dir / "train.csv")
    save_manifest(val_m, out_dir / "val.csv")
    logger.info("split %d records into %d train / %d val", len(manifest),
                len(train_m), len(val_m))
    return 0


def cmd_train(args) -> int:
    cfg = _load_effective_config(
        args, train_proc=args.train_proc, val_proc=args.val_proc, lr=args.lr,
        epochs=args.epochs, batch_size=args.batch_size,
        steps_per_epoch=args.steps_per_epoch)
    if not cfg.train_proc or not cfg.val_proc:
        raise ConfigError("train requires train_proc and val_proc (processed trees)")
    train_ds = load_processed(cfg.train_proc, cfg.norm_mean, cfg.norm_std)
    val_ds = load_processed(cfg.val_proc, cfg.norm_mean, cfg.norm_std)
    model = DualBranchModel(cfg.model_config(), seed=cfg.seed)
    extra = preproc_hyper(cfg.preprocess_params())
    best, history = fit(model, train_ds, val_ds, cfg.train_config(),
                        aug_cfg=cfg.augment_config(),
                        weight_exponent=cfg.weight_exponent, extra_hyper=extra,
                        inject_nan_at=args.debug_inject_nan
                        if args.debug_inject_nan is not None else -1)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(best, out_dir / "checkpoint.rgck")
    write_history_csv(history, out_dir / "history.csv")
    report.plot_history(history, out_dir / "curves.png")
    summary = (f"best epoch: {best.epoch}\n"
               f"best val qwk: {best.best_val_qwk:.6f}\n"
               f"epochs: {len(history)}\n")
    (out_dir / "report.txt").write_text(summary, encoding="utf-8")
    for h in history:
        print(f"epoch {h.epoch}: loss={h.train_loss:.4f} "
              f"train_qwk={h.train_qwk:.4f} val_qwk={h.val_qwk:.4f}")
    print(f"best epoch {best.epoch} val_qwk {best.best_val_qwk:.4f}")
    return 0


def _filter_domain(manifest: Manifest, domain: str | None) -> Manifest:
    if not domain:
        return manifest
    records = [r for r in manifest if r.domain == domain]
    if not records:
        raise InvalidInputError(f"no records with domain {domain!r}")
    return Manifest(records)


def cmd_evaluate(args) -> int:
    ck, model = _load_checkpoint_model(args.checkpoint)
    try:
        params = preproc_from_hyper(ck.hyper)
        mean, std = norm_from_hyper(ck.hyper)
    except KeyError as e:
        raise CheckpointError(f"checkpoint header is missing key {e}") from e
    manifest = _filter_domain(load_manifest(args.manifest), args.domain)
    reference = None
    if not args.no_hist_match and args.reference:
        reference = prepare_reference(args.reference, params)
    try:
        ds = preprocess_to_dataset(manifest, params, reference, args.reference_domain,
                                   match=not args.no_hist_match, mean=mean, std=std)
        qwk_value, cm = evaluate_model(model, ds)
    except ShapeError as e:
        raise CheckpointError(f"checkpoint incompatible with manifest: {e}") from e
    out_dir = Path(getattr(args, "out", None) or "out")
    report.write_eval_report(out_dir, args.tag, qwk_value, cm)
    print(f"qwk[{args.tag}] = {qwk_value:.6f}")
    return 0


def cmd_predict(args) -> int:
    ck, model = _load_checkpoint_model(args.checkpoint)
    params = preproc_from_hyper(ck.hyper)
    mean, std = norm_from_hyper(ck.hyper)
    reference = prepare_reference(args.reference, params) if args.reference else None
    n_thresh = model.cfg.n_grades - 1
    header = "path,grade," + ",".join(f"logit_{k}" for k in range(1, n_thresh + 1))
    lines = [header]
    n_failed = 0
    for path in args.images:
        try:
            img = read_image(path)
            b0, b3, _ = preprocess_image(img, params, reference)
            x0 = to_input_tensor(b0, mean, std)[None]
            x3 = to_input_tensor(b3, mean, std)[None]
            z = model.forward(x0, x3)[0]
            grade = int(coral_decode(z))
            lines.append(f"{path},{grade}," + ",".join(repr(float(v)) for v in z))
        except (RetgradeError, OSError) as e:
            logger.error("prediction failed for %s: %s", path, e)
            lines.append(f"{path}," + "," * n_thresh)
            n_failed += 1
    out_csv = Path(getattr(args, "out", None) or "predictions.csv")
    out_csv.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    if n_failed == len(args.images):
        raise ImageIOError("all input images failed to load")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="experiment config file (key=value lines)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="retgrade", parents=[common],
                                     description="Dual-resolution ordinal grading pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--n-per-grade", type=int, default=100)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--blob-ranges", default="0-0,1-2,3-5,6-9,10-15",
                   help="per-grade lo-hi blob counts, comma separated")
    p.add_argument("--shift-from", default=None,
                   help="apply a domain shift to this manifest instead of generating")
    p.add_argument("--gain", default="1.35,0.95,0.7")
    p.add_argument("--vignette", type=float, default=0.35)
    p.add_argument("--blur", type=float, default=0.5)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", parents=[common], help="build branch image trees")
    p.add_argument("--manifest", required=True)
    p.add_argument("--size0", type=int, default=None)
    p.add_argument("--size3", type=int, default=None)
    p.add_argument("--reference", default=None, help="histogram-matching reference image")
    p.add_argument("--reference-domain", default=None)
    p.add_argument("--no-hist-match", action="store_true")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("split", parents=[common], help="stratified train/val split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-fraction", type=float, default=None)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", parents=[common], help="train and checkpoint the model")
    p.add_argument("--train-proc", default=None, help="processed training tree")
    p.add_argument("--val-proc", default=None, help="processed validation tree")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--steps-per-epoch", type=int, default=None)
    p.add_argument("--debug-inject-nan", type=int, default=None, metavar="STEP",
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--domain", default=None, help="restrict to records with this domain tag")
    p.add_argument("--reference", default=None)
    p.add_argument("--reference-domain", default="synthA")
    p.add_argument("--no-hist-match", action="store_true")
    p.add_argument("--tag", default="eval", help="label used in report file names")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", parents=[common], help="per-image grade predictions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--reference", default=None)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_predict)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    quiet = getattr(args, "quiet", False)
    logging.basicConfig(level=logging.WARNING if quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidInputError, ManifestError) as e:
        logger.error("%s", e)
        return EXIT_CONFIG
    except NumericError as e:
        logger.error("%s", e)
        return EXIT_NUMERIC
    except CheckpointError as e:
        logger.error("%s", e)
        return EXIT_CHECKPOINT
    except (ImageIOError, OSError) as e:
        logger.error("%s", e)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
