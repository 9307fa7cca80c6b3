"""Deterministic five-fold partitioning and the cross-validation driver.

Fold assignment shuffles records with a seeded generator and deals them
round-robin; with gender stratification each gender is shuffled and dealt
separately, continuing from where the previous group stopped so overall
fold sizes still differ by at most one. Experiment e tests on fold e,
validates on fold (e+1) mod n and trains on the rest, so every record is
tested exactly once across the n experiments.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError
from .records import Gender, PatientRecord

N_FOLDS = 5

PREDICTION_COLUMNS = ("patient_id", "gender", "age_years", "true_right",
                      "true_left", "pred_right", "pred_left", "fold")


@dataclass(frozen=True)
class FoldPlan:
    seed: int
    stratify_by_gender: bool
    assignment: dict[str, int]  # patient_id -> fold index
    n_folds: int = N_FOLDS

    def fold_ids(self, fold: int) -> list[str]:
        return [pid for pid, f in self.assignment.items() if f == fold]

    def roles(self, experiment: int) -> dict:
        """Train/val/test fold indices for one experiment."""
        if not (0 <= experiment < self.n_folds):
            raise ConfigError(f"experiment must lie in [0, {self.n_folds}), got {experiment}")
        test = experiment
        val = (experiment + 1) % self.n_folds
        train = [f for f in range(self.n_folds) if f not in (test, val)]
        return {"test": test, "val": val, "train": train}

    def split(self, records: Sequence[PatientRecord], experiment: int):
        roles = self.roles(experiment)
        by_fold = {r.patient_id: self.assignment[r.patient_id] for r in records}
        train = [r for r in records if by_fold[r.patient_id] in roles["train"]]
        val = [r for r in records if by_fold[r.patient_id] == roles["val"]]
        test = [r for r in records if by_fold[r.patient_id] == roles["test"]]
        return train, val, test

    def to_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "stratify_by_gender": self.stratify_by_gender,
            "n_folds": self.n_folds,
            "assignments": [{"patient_id": pid, "fold": fold}
                            for pid, fold in self.assignment.items()],
            "roles": {str(e): self.roles(e) for e in range(self.n_folds)},
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        data = json.loads(text)
        return cls(seed=data["seed"], stratify_by_gender=data["stratify_by_gender"],
                   assignment={a["patient_id"]: a["fold"] for a in data["assignments"]},
                   n_folds=data["n_folds"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "FoldPlan":
        return cls.from_json(Path(path).read_text())


def make_folds(records: Sequence[PatientRecord], seed: int,
               stratify_by_gender: bool = True, n_folds: int = N_FOLDS) -> FoldPlan:
    """Deterministically partition records into n folds of near-equal size."""
    if len(records) < n_folds:
        raise ConfigError(f"need at least {n_folds} records to build {n_folds} folds, "
                          f"got {len(records)}")
    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    cursor = 0
    if stratify_by_gender:
        groups = [[r for r in records if r.gender is Gender.MALE],
                  [r for r in records if r.gender is Gender.FEMALE]]
    else:
        groups = [list(records)]
    for group in groups:
        order = rng.permutation(len(group))
        for k in order:
            assignment[group[k].patient_id] = cursor % n_folds
            cursor += 1
    return FoldPlan(seed=seed, stratify_by_gender=stratify_by_gender,
                    assignment=assignment, n_folds=n_folds)


# A trainer builds a predictor from (train_records, val_records, exp_dir);
# the predictor maps records to an (N, 2) array of (right, left) degrees.
Trainer = Callable[[Sequence[PatientRecord], Sequence[PatientRecord], Path],
                   Callable[[Sequence[PatientRecord]], np.ndarray]]


def write_predictions(path: str | Path, records: Sequence[PatientRecord],
                      degrees: np.ndarray, fold: int) -> None:
    degrees = np.asarray(degrees, dtype=np.float64)
    if degrees.shape != (len(records), 2):
        raise ConfigError(f"predictions must be (n, 2), got {degrees.shape}")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTION_COLUMNS)
        for rec, (pr, pl) in zip(records, degrees):
            writer.writerow([rec.patient_id, rec.gender.value, repr(rec.age_years),
                             repr(rec.right_angle_deg), repr(rec.left_angle_deg),
                             repr(float(pr)), repr(float(pl)), fold])


def run_cv(records: Sequence[PatientRecord], plan: FoldPlan, trainer: Trainer,
           out_dir: str | Path) -> list[Path]:
    """Run all experiments sequentially, writing fold_<e>/predictions.csv.

    Any experiment failure propagates after earlier folds' outputs are
    already on disk. Returns the prediction file paths in fold order.
    """
    missing = [r.patient_id for r in records if r.patient_id not in plan.assignment]
    if missing:
        raise ConfigError(f"fold plan does not cover {len(missing)} record(s), "
                          f"e.g. {missing[:3]}")
    out_dir = Path(out_dir)
    paths = []
    for e in range(plan.n_folds):
        exp_dir = out_dir / f"fold_{e}"
        exp_dir.mkdir(parents=True, exist_ok=True)
        train_recs, val_recs, test_recs = plan.split(records, e)
        predictor = trainer(train_recs, val_recs, exp_dir)
        degrees = predictor(test_recs)
        pred_path = exp_dir / "predictions.csv"
        write_predictions(pred_path, test_recs, degrees, fold=e)
        paths.append(pred_path)
    return paths
