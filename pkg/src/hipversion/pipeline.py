"""Glue between configuration and the pipeline stages.

The CLI stays thin: each subcommand body lives here so tests can drive
the exact same code paths in-process.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from . import folds as folds_mod
from .config import RunConfig, save_resolved
from .errors import ConfigError
from .folds import FoldPlan, make_folds, run_cv
from .model import ModelBundle, build, load_bundle, predict_degrees, save_bundle
from .records import PatientRecord, ingest
from .report import build_report, emit_report, load_predictions
from .training import TrainResult, prepare_plane, record_to_input, train


def load_dataset(config: RunConfig) -> list[PatientRecord]:
    d = config.dataset
    if not d.metadata or not d.image_root:
        raise ConfigError("dataset.metadata and dataset.image_root must be set")
    return ingest(d.metadata, d.image_root,
                  age_range=d.age_range, angle_range=d.angle_range)


def build_bundle(config: RunConfig, seed: int) -> ModelBundle:
    return build(config.backbone, config.head, config.image.side, seed=seed,
                 age_bounds=config.dataset.age_bounds,
                 channel_mean=config.image.channel_mean,
                 channel_std=config.image.channel_std,
                 config_digest=config.digest())


def bundle_predictor(bundle: ModelBundle, batch_size: int = 8):
    """Per-record degree predictions using the bundle's own preprocessing
    constants."""

    def predict(records: Sequence[PatientRecord]) -> np.ndarray:
        out = []
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            inputs = [record_to_input(prepare_plane(r, bundle.input_side), r, bundle)
                      for r in chunk]
            out.append(predict_degrees(bundle, inputs))
        return np.concatenate(out, axis=0)

    return predict


def make_trainer(config: RunConfig, log_every: int = 0) -> folds_mod.Trainer:
    """Trainer for run_cv: seeds each experiment's init off the run seed."""

    def trainer(train_records, val_records, exp_dir: Path):
        experiment = int(str(exp_dir.name).rsplit("_", 1)[-1])
        bundle = build_bundle(config, seed=config.training.seed * 1000003 + experiment)
        result = train(train_records, val_records, bundle,
                       config.train_run_config(), out_dir=exp_dir,
                       log_every=log_every)
        return bundle_predictor(result.bundle, config.training.batch_size)

    return trainer


def _is_complete(paths: Sequence[Path]) -> bool:
    return all(p.exists() for p in paths)


def cv_run(config: RunConfig, run_dir: Path, force: bool = False,
           log_every: int = 0) -> list[Path]:
    """make_folds + run_cv with the on-disk layout:
    run_dir/{config.resolved.toml, foldplan.json, fold_<e>/...}."""
    expected = [run_dir / "foldplan.json"] + [
        run_dir / f"fold_{e}" / "predictions.csv" for e in range(folds_mod.N_FOLDS)]
    if not force and _is_complete(expected):
        return expected[1:]
    records = load_dataset(config)
    save_resolved(config, run_dir)
    plan = make_folds(records, seed=config.cv.seed,
                      stratify_by_gender=config.cv.stratify_by_gender)
    plan.save(run_dir / "foldplan.json")
    return run_cv(records, plan, make_trainer(config, log_every=log_every), run_dir)


def train_run(config: RunConfig, run_dir: Path, force: bool = False,
              log_every: int = 0) -> TrainResult | None:
    """Single deterministic train/val split (no test fold).

    Returns None when the run directory is already complete and force is
    not set.
    """
    expected = [run_dir / "bundle.zip", run_dir / "history.jsonl"]
    if not force and _is_complete(expected):
        return None
    records = load_dataset(config)
    frac = config.training.val_fraction
    if not (0.0 < frac < 1.0):
        raise ConfigError(f"training.val_fraction must lie in (0, 1), got {frac}")
    n_val = max(1, round(len(records) * frac))
    if n_val >= len(records):
        raise ConfigError("validation split would consume every record")
    rng = np.random.default_rng(config.training.seed)
    order = rng.permutation(len(records))
    val_records = [records[i] for i in order[:n_val]]
    train_records = [records[i] for i in order[n_val:]]
    save_resolved(config, run_dir)
    bundle = build_bundle(config, seed=config.training.seed)
    return train(train_records, val_records, bundle, config.train_run_config(),
                 out_dir=run_dir, log_every=log_every)


def evaluate_run(run_dir: Path, config: RunConfig, force: bool = False) -> list[Path]:
    """Regenerate per-fold test predictions from saved bundles + fold plan."""
    plan_path = run_dir / "foldplan.json"
    if not plan_path.exists():
        raise ConfigError(f"{run_dir}: no foldplan.json; run cv first")
    plan = FoldPlan.load(plan_path)
    records = load_dataset(config)
    paths = []
    for e in range(plan.n_folds):
        exp_dir = run_dir / f"fold_{e}"
        pred_path = exp_dir / "predictions.csv"
        if pred_path.exists() and not force:
            paths.append(pred_path)
            continue
        bundle_path = exp_dir / "bundle.zip"
        if not bundle_path.exists():
            raise ConfigError(f"{exp_dir}: missing bundle.zip")
        bundle = load_bundle(bundle_path)
        _, _, test_records = plan.split(records, e)
        degrees = bundle_predictor(bundle)(test_records)
        folds_mod.write_predictions(pred_path, test_records, degrees, fold=e)
        paths.append(pred_path)
    return paths


def report_run(run_dir: Path, age_bins: Sequence[float] = (45.0, 65.0),
               force: bool = False, render_plots: bool = True) -> Path:
    report_dir = run_dir / "report"
    if (report_dir / "fold_table.csv").exists() and not force:
        return report_dir
    pred_files = sorted(run_dir.glob("fold_*/predictions.csv"))
    if not pred_files:
        raise ConfigError(f"{run_dir}: no fold_*/predictions.csv files to report on")
    rows = [row for path in pred_files for row in load_predictions(path)]
    report = build_report(rows, age_bins=age_bins)
    return emit_report(report, report_dir, render_plots=render_plots)
