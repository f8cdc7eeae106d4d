"""Command-line entry point.

Subcommands: synth (generate a surrogate dataset), splits (fold / LODO
plans), train, eval, infer.  Heavy imports happen inside the handlers so
``--threads`` can pin the BLAS thread pools before numpy loads.

Exit codes: 0 ok, 2 configuration error, 3 IO error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _set_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _load_run_config(args) -> "RunConfig":
    from .config import load_config, paper_config, toy_config

    if args.config == "paper":
        return paper_config()
    if args.config == "toy":
        return toy_config()
    return load_config(args.config)


def _apply_seed(cfg, args) -> None:
    if args.seed is not None:
        cfg.seed = args.seed


def cmd_synth(args) -> int:
    from .config import SynthConfig
    from .synth import write_synth_dataset

    cfg = SynthConfig(canvas=args.size)
    cfg.validate()
    os.makedirs(args.out, exist_ok=True)
    manifest = write_synth_dataset(args.out, args.count, cfg, args.seed or 0,
                                   dataset_tag=args.tag)
    print(f"wrote {args.count} samples; manifest: {manifest}")
    return EXIT_OK


def cmd_splits(args) -> int:
    from .evaluation import make_folds, make_lodo
    from .imagefiles import read_manifest

    rows = read_manifest(args.manifest)
    os.makedirs(args.out, exist_ok=True)
    if args.protocol == "cv5":
        plan = make_folds(rows, k=args.k, seed=args.seed if args.seed is not None else 42)
        path = os.path.join(args.out, "folds.tsv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("fold\trole\tid\n")
            for f in range(plan.k):
                for i in plan.held_out[f]:
                    fh.write(f"{f}\theld_out\t{i}\n")
                for i in plan.train[f]:
                    fh.write(f"{f}\ttrain\t{i}\n")
    else:
        plans = make_lodo(rows, seed=args.seed if args.seed is not None else 42)
        path = os.path.join(args.out, "lodo.tsv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("test_dataset\trole\tid\n")
            for plan in plans:
                for role, ids in (("test", plan.test), ("train", plan.train),
                                  ("val", plan.val)):
                    for i in ids:
                        fh.write(f"{plan.test_dataset}\t{role}\t{i}\n")
    print(f"wrote {path}")
    return EXIT_OK


def _read_split_file(path: str, fold: int) -> tuple[set[str], set[str]]:
    """Train/held-out id sets for one fold of a folds.tsv file."""
    train_ids: set[str] = set()
    held_ids: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("fold\t"):
            raise IOError(f"{path}: not a folds file")
        for line in fh:
            f, role, image_id = line.rstrip("\n").split("\t")
            if int(f) != fold:
                continue
            (train_ids if role == "train" else held_ids).add(image_id)
    if not train_ids and not held_ids:
        raise IOError(f"{path}: fold {fold} not present")
    return train_ids, held_ids


def _available_folds(path: str) -> list[int]:
    folds = set()
    with open(path, "r", encoding="utf-8") as fh:
        fh.readline()
        for line in fh:
            folds.add(int(line.split("\t", 1)[0]))
    return sorted(folds)


def _train_one(cfg, rows, train_rows, val_rows, out_dir, resume, epochs) -> float:
    from .data import load_samples
    from .training import Trainer

    print(f"loading {len(train_rows)} train / {len(val_rows)} val images ...")
    train_samples = load_samples(train_rows, cfg.model.full_resolution)
    val_samples = load_samples(val_rows, cfg.model.full_resolution)
    trainer = Trainer(cfg, train_samples, val_samples, out_dir)
    history = trainer.run(resume=resume, max_epochs=epochs)
    return max((h.get("val_dice", float("-inf")) for h in history),
               default=float("nan"))


def cmd_train(args) -> int:
    from .evaluation import qualified_id
    from .imagefiles import read_manifest

    cfg = _load_run_config(args)
    _apply_seed(cfg, args)
    rows = read_manifest(args.manifest)

    if args.splits:
        folds = _available_folds(args.splits) if args.fold < 0 else [args.fold]
        for fold in folds:
            train_ids, held_ids = _read_split_file(args.splits, fold)
            train_rows = [r for r in rows if qualified_id(r) in train_ids]
            val_rows = [r for r in rows if qualified_id(r) in held_ids]
            out_dir = (os.path.join(args.out, f"fold{fold}")
                       if len(folds) > 1 else args.out)
            best = _train_one(cfg, rows, train_rows, val_rows, out_dir,
                              args.resume, args.epochs)
            print(f"fold {fold}: best val dice {best:.4f}; checkpoints in {out_dir}")
        return EXIT_OK

    if args.val_manifest:
        val_rows = read_manifest(args.val_manifest)
        train_rows = rows
    else:
        # single protocol: last 25% of the manifest is the validation slice
        n_val = max(1, len(rows) // 4)
        train_rows = rows[:-n_val]
        val_rows = rows[-n_val:]
    best = _train_one(cfg, rows, train_rows, val_rows, args.out,
                      args.resume, args.epochs)
    print(f"done: best val dice {best:.4f}; checkpoints in {args.out}")
    return EXIT_OK


def _model_from_checkpoint(path: str):
    from .checkpoint import load_checkpoint
    from .config import config_from_text
    from .model import VesselNet

    config_text, meta, arrays = load_checkpoint(path)
    cfg = config_from_text(config_text)
    model = VesselNet(cfg.model, seed=cfg.seed)
    model.load_state_arrays(arrays)
    return cfg, meta, model


def cmd_eval(args) -> int:
    from .data import load_sample
    from .evaluation import roc_points, write_report
    from .imagefiles import read_manifest
    from .training import evaluate_model, predict_image
    import numpy as np

    cfg, _, model = _model_from_checkpoint(args.checkpoint)
    rows = read_manifest(args.manifest)
    samples, missing = [], []
    for row in rows:
        try:
            samples.append(load_sample(row, cfg.model.full_resolution))
        except FileNotFoundError:
            missing.append(f"{row.dataset}/{row.image_id}")
    if not samples:
        raise IOError(f"{args.manifest}: none of the {len(rows)} images could be read")
    use_tta = args.tta == 8
    metrics = evaluate_model(model, samples, use_tta=use_tta)
    groups = write_report(metrics, args.out, missing=missing or None)

    # pooled ROC points over all evaluated pixels, for external plotting
    scores, labels = [], []
    for s in samples:
        prob, _ = predict_image(model, s.four, use_tta=use_tta)
        scores.append(prob.ravel())
        labels.append(s.mask_r.ravel())
    scores = np.concatenate(scores)
    labels = np.concatenate(labels)
    if 0 < labels.sum() < labels.size:
        fpr, tpr = roc_points(scores, labels)
        with open(os.path.join(args.out, "roc_points.tsv"), "w", encoding="utf-8") as fh:
            fh.write("fpr\ttpr\n")
            for a, b in zip(fpr, tpr):
                fh.write(f"{a:.9f}\t{b:.9f}\n")
    overall = groups["overall"]
    note = f"; MISSING {len(missing)} images (see summary.txt)" if missing else ""
    print(f"evaluated {len(metrics)} images (tta={args.tta}); "
          f"dice {overall['dice']['mean']:.4f} sens {overall['sensitivity']['mean']:.4f}; "
          f"report in {args.out}{note}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .imagefiles import read_image, write_image
    from .preprocess import assemble_four_channel
    from .training import predict_image
    import numpy as np

    cfg, _, model = _model_from_checkpoint(args.checkpoint)
    img = read_image(args.image)
    four = assemble_four_channel(img, cfg.model.full_resolution)
    prob, mask = predict_image(model, four, use_tta=args.tta == 8)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    prob_path = os.path.join(args.out, f"{stem}_prob.png")
    mask_path = os.path.join(args.out, f"{stem}_mask.png")
    write_image(prob_path, np.clip(np.round(prob * 255.0), 0, 255).astype(np.uint8))
    write_image(mask_path, (mask * 255).astype(np.uint8))
    print(f"wrote {prob_path} and {mask_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vesselseg",
        description="Multi-scale attention vessel segmentation (CPU, deterministic).",
        epilog="Note: JPEG images are not supported; convert them to PNG first.")
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS/OpenMP thread cap (1 = bitwise-reproducible runs)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic vessel dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tag", default="synth",
                   help="dataset tag written to the manifest (three differently "
                        "tagged sets enable the LODO protocol)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("splits", help="write fold or LODO split plans")
    p.add_argument("--manifest", required=True)
    p.add_argument("--protocol", choices=("cv5", "lodo"), default="cv5")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_splits)

    p = sub.add_parser("train", help="train on a manifest")
    p.add_argument("--config", required=True,
                   help="config file path, or the shipped profiles 'toy' / 'paper'")
    p.add_argument("--manifest", required=True)
    p.add_argument("--splits", help="folds.tsv from the splits command")
    p.add_argument("--fold", type=int, default=0,
                   help="fold index to train, or -1 for every fold in the plan")
    p.add_argument("--val-manifest", help="explicit validation manifest")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None,
                   help="override the configured epoch count")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--tta", type=int, choices=(0, 8), default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment a single image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--tta", type=int, choices=(0, 8), default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _set_threads(args.threads)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # map failure classes onto exit codes
        from .config import ConfigError

        kind = EXIT_IO
        name = type(exc).__name__
        if isinstance(exc, (ConfigError, ValueError)):
            kind = EXIT_CONFIG
        if (name in ("TrainAbort", "OptimizerError")
                or isinstance(exc, (FloatingPointError, ArithmeticError))):
            kind = EXIT_NUMERIC
        print(f"error ({name}): {exc}", file=sys.stderr)
        return kind


if __name__ == "__main__":
    sys.exit(main())
