"""Command-line entry point.

Subcommands: phantom | ingest-check | train | cv | evaluate | report |
predict. Exit codes: 0 success, 1 validation/runtime failure (stderr gets
one line "<category>: <message>"), 2 usage errors (argparse). Completed
run directories are left untouched unless --force is passed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import RunConfig, load_config, resolve_run_dir
from .errors import ConfigError, HipVersionError
from .model import load_bundle, predict_degrees
from .phantom import GenderModel, PhantomSpec, generate
from .pipeline import cv_run, evaluate_run, report_run, train_run
from .records import Gender, compute_stats, encode_gender, ingest, normalize_age
from .preprocess import load_image, to_model_input
from .training import prepare_plane


def _load_config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _phantom_spec(config: RunConfig, args) -> PhantomSpec:
    p = config.phantom
    kwargs = dict(population=p.population, side=p.side, noise_level=p.noise_level,
                  seed=p.seed, age_angle_drift=p.age_angle_drift,
                  gender_ratio=tuple(p.gender_ratio))
    for name in ("population", "side", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            kwargs[name] = value
    if getattr(args, "noise", None) is not None:
        kwargs["noise_level"] = args.noise
    return PhantomSpec(**kwargs)


def cmd_phantom(args) -> int:
    spec = _phantom_spec(_load_config(args), args)
    out = Path(args.out)
    if (out / "metadata.csv").exists() and not args.force:
        print(f"phantom population already present at {out}; use --force to regenerate")
        return 0
    metadata = generate(spec, out)
    print(f"wrote {spec.population} phantom subjects; metadata at {metadata}")
    return 0


def cmd_ingest_check(args) -> int:
    config = _load_config(args)
    metadata = args.metadata or config.dataset.metadata
    image_root = args.image_root or config.dataset.image_root
    if not metadata or not image_root:
        raise ConfigError("provide --metadata/--image-root or a config with [dataset]")
    records = ingest(metadata, image_root,
                     age_range=config.dataset.age_range,
                     angle_range=config.dataset.angle_range)
    bins = tuple(args.age_bins) if args.age_bins else config.dataset.age_bins
    if not records:
        print("0 valid records")
        return 0
    stats = compute_stats(records, age_bins=bins)
    print(f"{len(records)} valid records")
    print(f"{'group':24s} {'n':>5s} {'age':>16s} {'right':>16s} {'left':>16s}")
    for (gender, band), g in sorted(stats.groups.items()):
        label = f"{gender}/{band}"
        print(f"{label:24s} {g.count:5d} "
              f"{g.age.mean:8.2f}±{g.age.sd:<7.2f} "
              f"{g.right_angle.mean:8.2f}±{g.right_angle.sd:<7.2f} "
              f"{g.left_angle.mean:8.2f}±{g.left_angle.sd:<7.2f}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    if args.seed is not None:
        config.training.seed = args.seed
    run_dir = resolve_run_dir(config, args.run_dir)
    result = train_run(config, run_dir, force=args.force, log_every=args.log_every)
    if result is None:
        print(f"run directory {run_dir} already complete; use --force to retrain")
    else:
        print(f"trained {result.bundle.backbone_spec.architecture} for "
              f"{len(result.history)} epochs; best val loss "
              f"{result.best_val_loss:.6g} at epoch {result.best_epoch}; "
              f"outputs in {run_dir}")
    return 0


def cmd_cv(args) -> int:
    config = _load_config(args)
    if args.seed is not None:
        config.cv.seed = args.seed
    run_dir = resolve_run_dir(config, args.run_dir)
    paths = cv_run(config, run_dir, force=args.force, log_every=args.log_every)
    print(f"cross-validation complete; {len(paths)} prediction files under {run_dir}")
    return 0


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run_dir)
    config = load_config(args.config) if args.config else load_config(
        run_dir / "config.resolved.toml")
    paths = evaluate_run(run_dir, config, force=args.force)
    print(f"{len(paths)} prediction files ready under {run_dir}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    bins = tuple(args.age_bins) if args.age_bins else (45.0, 65.0)
    report_dir = report_run(run_dir, age_bins=bins, force=args.force,
                            render_plots=not args.no_plots)
    print(f"report written to {report_dir}")
    return 0


def cmd_predict(args) -> int:
    bundle = load_bundle(args.bundle)
    gender = Gender(args.gender.upper())
    plane = prepare_plane(load_image(args.image), bundle.input_side)
    model_input = to_model_input(plane,
                                 normalize_age(args.age, bundle.age_bounds),
                                 encode_gender(gender),
                                 channel_mean=bundle.channel_mean,
                                 channel_std=bundle.channel_std)
    right, left = predict_degrees(bundle, [model_input])[0]
    lines = ["image,age_years,gender,pred_right_deg,pred_left_deg",
             f"{args.image},{args.age!r},{gender.value},{float(right)!r},{float(left)!r}"]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hipversion",
        description="Acetabular version regression from AP pelvic radiographs: "
                    "phantom generation, training, cross-validation and reporting.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom population")
    p.add_argument("--config", help="run configuration TOML")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--population", type=int)
    p.add_argument("--side", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("ingest-check", help="validate a dataset and print statistics")
    p.add_argument("--config")
    p.add_argument("--metadata")
    p.add_argument("--image-root")
    p.add_argument("--age-bins", type=float, nargs="+")
    p.set_defaults(func=cmd_ingest_check)

    p = sub.add_parser("train", help="train on a single train/val split")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="five-fold cross-validation")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir")
    p.add_argument("--seed", type=int, help="override the fold seed")
    p.add_argument("--force", action="store_true")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("evaluate", help="regenerate per-fold predictions from bundles")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--config", help="defaults to run_dir/config.resolved.toml")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="build the evaluation report from predictions")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--age-bins", type=float, nargs="+")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("predict", help="predict both angles for one image")
    p.add_argument("--bundle", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--age", type=float, required=True)
    p.add_argument("--gender", required=True, choices=["M", "F", "m", "f"])
    p.add_argument("--out", help="write the CSV here instead of stdout")
    p.set_defaults(func=cmd_predict)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except HipVersionError as exc:
        print(f"{exc.category}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
