"""Per-sample errors, clinical error bands, aggregate tables and plots.

Bands: accurate (error <= 3 degrees), moderate (3 < error <= 6), poor
(> 6). Fold-table average rows are the unweighted mean of the per-fold
means; the paired SD is computed from the per-sample errors pooled across
folds (labeled as such in the output). All CSV series are the report's
contract; rendered images are best-effort.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError, SchemaError
from .folds import PREDICTION_COLUMNS
from .records import age_bin_index, age_bin_labels

ACCURATE_MAX_DEG = 3.0
MODERATE_MAX_DEG = 6.0

HIPS = ("right", "left")
GENDER_GROUPS = ("male", "female", "both")


class ErrorBand(Enum):
    ACCURATE = "accurate"
    MODERATE = "moderate"
    POOR = "poor"


def classify_error(abs_error_deg: float) -> ErrorBand:
    """Map a nonnegative absolute error in degrees onto its band."""
    if not (abs_error_deg >= 0.0):
        raise ValueError(f"absolute error must be >= 0, got {abs_error_deg}")
    if abs_error_deg <= ACCURATE_MAX_DEG:
        return ErrorBand.ACCURATE
    if abs_error_deg <= MODERATE_MAX_DEG:
        return ErrorBand.MODERATE
    return ErrorBand.POOR


@dataclass(frozen=True)
class PredictionRow:
    patient_id: str
    gender: str  # "M" / "F"
    age_years: float
    true_right: float
    true_left: float
    pred_right: float
    pred_left: float
    fold: int

    @property
    def err_right(self) -> float:
        return abs(self.pred_right - self.true_right)

    @property
    def err_left(self) -> float:
        return abs(self.pred_left - self.true_left)

    def err(self, hip: str) -> float:
        return self.err_right if hip == "right" else self.err_left

    def truth(self, hip: str) -> float:
        return self.true_right if hip == "right" else self.true_left

    def pred(self, hip: str) -> float:
        return self.pred_right if hip == "right" else self.pred_left


def load_predictions(path: str | Path) -> list[PredictionRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(c not in reader.fieldnames
                                            for c in PREDICTION_COLUMNS):
            raise SchemaError(f"{path}: prediction file must have columns "
                              f"{','.join(PREDICTION_COLUMNS)}")
        return [PredictionRow(
            patient_id=row["patient_id"], gender=row["gender"],
            age_years=float(row["age_years"]),
            true_right=float(row["true_right"]), true_left=float(row["true_left"]),
            pred_right=float(row["pred_right"]), pred_left=float(row["pred_left"]),
            fold=int(row["fold"])) for row in reader]


def _mean(xs: Sequence[float]) -> float:
    return sum(xs) / len(xs)


def _sd(xs: Sequence[float]) -> float:
    if len(xs) < 2:
        return 0.0
    m = _mean(xs)
    return math.sqrt(sum((x - m) ** 2 for x in xs) / (len(xs) - 1))


def _in_gender_group(row: PredictionRow, group: str) -> bool:
    return group == "both" or row.gender == ("M" if group == "male" else "F")


def average_fold_means(fold_means: Sequence[float]) -> float:
    """The fold-table averaging rule: unweighted mean of the fold means."""
    if not fold_means:
        raise ConfigError("cannot average zero fold means")
    return _mean(fold_means)


@dataclass(frozen=True)
class AverageCheck:
    recomputed: float
    reported: float
    consistent: bool

    def note(self, cell: str) -> str:
        return (f"{cell}: reported average {self.reported:g} differs from the "
                f"unweighted mean of its own column {self.recomputed:.6g}")


def check_reported_averages(fold_means: dict[str, Sequence[float]],
                            reported: dict[str, float],
                            tol: float = 0.005) -> dict[str, AverageCheck]:
    """Cross-check claimed per-column averages against the averaging rule."""
    out: dict[str, AverageCheck] = {}
    for cell, means in fold_means.items():
        if cell not in reported:
            continue
        recomputed = average_fold_means(list(means))
        out[cell] = AverageCheck(recomputed=recomputed, reported=reported[cell],
                                 consistent=abs(recomputed - reported[cell]) <= tol)
    return out


@dataclass
class FoldTableRow:
    label: str
    n_male: int
    n_female: int
    # cell key: (gender_group, hip) -> (mean, sd) or None for an empty group
    cells: dict[tuple[str, str], tuple[float, float] | None]


@dataclass
class FoldTable:
    rows: list[FoldTableRow]        # one per fold, in fold order
    average: FoldTableRow           # unweighted mean of fold means; pooled SD
    notes: list[str] = field(default_factory=list)

    def cell_means(self, group: str, hip: str) -> list[float]:
        return [row.cells[(group, hip)][0] for row in self.rows
                if row.cells[(group, hip)] is not None]


def fold_table(rows_by_fold: dict[int, Sequence[PredictionRow]] | None = None,
               prediction_files: Sequence[str | Path] | None = None) -> FoldTable:
    """Mean +- SD of absolute error per hip per gender group per fold,
    plus the average row."""
    if rows_by_fold is None:
        if not prediction_files:
            raise ConfigError("fold_table needs rows_by_fold or prediction_files")
        rows_by_fold = {}
        for path in prediction_files:
            for row in load_predictions(path):
                rows_by_fold.setdefault(row.fold, []).append(row)
    folds = sorted(rows_by_fold)

    table_rows: list[FoldTableRow] = []
    for fold in folds:
        rows = list(rows_by_fold[fold])
        cells: dict[tuple[str, str], tuple[float, float] | None] = {}
        for group in GENDER_GROUPS:
            member_rows = [r for r in rows if _in_gender_group(r, group)]
            for hip in HIPS:
                errs = [r.err(hip) for r in member_rows]
                cells[(group, hip)] = (_mean(errs), _sd(errs)) if errs else None
        table_rows.append(FoldTableRow(
            label=f"fold_{fold}",
            n_male=sum(1 for r in rows if r.gender == "M"),
            n_female=sum(1 for r in rows if r.gender == "F"),
            cells=cells))

    avg_cells: dict[tuple[str, str], tuple[float, float] | None] = {}
    pooled_rows = [r for fold in folds for r in rows_by_fold[fold]]
    for group in GENDER_GROUPS:
        for hip in HIPS:
            means = [row.cells[(group, hip)][0] for row in table_rows
                     if row.cells[(group, hip)] is not None]
            pooled = [r.err(hip) for r in pooled_rows if _in_gender_group(r, group)]
            avg_cells[(group, hip)] = ((average_fold_means(means), _sd(pooled))
                                       if means else None)
    average = FoldTableRow(label="average",
                           n_male=sum(r.n_male for r in table_rows),
                           n_female=sum(r.n_female for r in table_rows),
                           cells=avg_cells)
    return FoldTable(rows=table_rows, average=average,
                     notes=["average row: unweighted mean of fold means; "
                            "SD pooled over per-sample errors across folds"])


@dataclass
class GroupReport:
    group: str
    n: int
    mean_error: dict[str, float]          # hip -> mean abs error
    sd_error: dict[str, float]
    mean_band: dict[str, ErrorBand]       # band of the mean error
    band_fractions: dict[ErrorBand, float]  # over both hips pooled
    scatter: dict[str, list[tuple[str, float, float]]]  # hip -> (id, truth, pred)
    empty: bool = False


def group_report(rows: Sequence[PredictionRow], group: str,
                 members: Sequence[PredictionRow] | None = None) -> GroupReport:
    """Aggregate one sample group; an empty group yields a marker report."""
    member_rows = list(members) if members is not None else [
        r for r in rows if _in_gender_group(r, group)]
    if not member_rows:
        return GroupReport(group=group, n=0, mean_error={}, sd_error={},
                           mean_band={}, band_fractions={}, scatter={}, empty=True)
    mean_error = {}
    sd_error = {}
    mean_band = {}
    scatter = {}
    for hip in HIPS:
        errs = [r.err(hip) for r in member_rows]
        mean_error[hip] = _mean(errs)
        sd_error[hip] = _sd(errs)
        mean_band[hip] = classify_error(mean_error[hip])
        scatter[hip] = [(r.patient_id, r.truth(hip), r.pred(hip)) for r in member_rows]
    pooled = [r.err(hip) for r in member_rows for hip in HIPS]
    fractions = {band: sum(1 for e in pooled if classify_error(e) is band) / len(pooled)
                 for band in ErrorBand}
    return GroupReport(group=group, n=len(member_rows), mean_error=mean_error,
                       sd_error=sd_error, mean_band=mean_band,
                       band_fractions=fractions, scatter=scatter)


@dataclass(frozen=True)
class HistogramBin:
    lo: float
    hi: float
    count: int
    mean_abs_error: float | None
    band: ErrorBand | None


def angle_histogram(observations: Sequence[tuple[float, float]],
                    bin_width_deg: float = 1.0) -> list[HistogramBin]:
    """Bin (true angle, abs error) observations over the true angle.

    Bins are [k*w, (k+1)*w) spanning the observed range; empty bins are
    emitted with count 0 and no band color.
    """
    if bin_width_deg <= 0:
        raise ConfigError(f"bin width must be positive, got {bin_width_deg}")
    if not observations:
        return []
    w = bin_width_deg
    k_lo = math.floor(min(a for a, _ in observations) / w)
    k_hi = math.floor(max(a for a, _ in observations) / w)
    buckets: dict[int, list[float]] = {k: [] for k in range(k_lo, k_hi + 1)}
    for angle, err in observations:
        k = min(math.floor(angle / w), k_hi)
        buckets[k].append(err)
    bins = []
    for k in range(k_lo, k_hi + 1):
        errs = buckets[k]
        if errs:
            mean_err = _mean(errs)
            bins.append(HistogramBin(k * w, (k + 1) * w, len(errs), mean_err,
                                     classify_error(mean_err)))
        else:
            bins.append(HistogramBin(k * w, (k + 1) * w, 0, None, None))
    return bins


@dataclass
class EvaluationReport:
    rows: list[PredictionRow]
    folds: FoldTable
    gender_groups: list[GroupReport]
    age_groups: list[GroupReport]
    histogram: list[HistogramBin]
    age_bins: tuple[float, ...]


def build_report(rows: Sequence[PredictionRow],
                 age_bins: Sequence[float] = (45.0, 65.0),
                 histogram_bin_width: float = 1.0) -> EvaluationReport:
    rows = list(rows)
    rows_by_fold: dict[int, list[PredictionRow]] = {}
    for r in rows:
        rows_by_fold.setdefault(r.fold, []).append(r)

    gender_groups = [group_report(rows, g) for g in ("male", "female", "both")]

    labels = age_bin_labels(age_bins)
    age_groups = []
    for i, label in enumerate(labels):
        members = [r for r in rows if age_bin_index(r.age_years, age_bins) == i]
        age_groups.append(group_report(rows, f"age_{label}", members=members))

    observations = [(r.truth(hip), r.err(hip)) for r in rows for hip in HIPS]
    return EvaluationReport(rows=rows, folds=fold_table(rows_by_fold=rows_by_fold),
                            gender_groups=gender_groups, age_groups=age_groups,
                            histogram=angle_histogram(observations, histogram_bin_width),
                            age_bins=tuple(float(e) for e in age_bins))


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def emit_report(report: EvaluationReport, out_dir: str | Path,
                render_plots: bool = True) -> Path:
    """Write the report CSV series (contract) and best-effort plot images.

    Layout: report/{fold_table.csv, gender_table.csv, age_table.csv,
    scatter_<group>_<hip>.csv, histogram.csv, plots/*.png}.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    ft_header = ["fold", "n_male", "n_female"]
    for group in GENDER_GROUPS:
        for hip in ("left", "right"):
            ft_header += [f"{group}_{hip}_mean", f"{group}_{hip}_sd"]
    ft_rows = []
    for row in report.folds.rows + [report.folds.average]:
        out = [row.label, row.n_male, row.n_female]
        for group in GENDER_GROUPS:
            for hip in ("left", "right"):
                cell = row.cells[(group, hip)]
                out += [_fmt(cell[0]) if cell else "", _fmt(cell[1]) if cell else ""]
        ft_rows.append(out)
    _write_csv(out_dir / "fold_table.csv", ft_header, ft_rows)

    group_header = ["group", "n", "left_mean", "left_sd", "left_band",
                    "right_mean", "right_sd", "right_band",
                    "frac_accurate", "frac_moderate", "frac_poor"]

    def group_row(g: GroupReport):
        if g.empty:
            return [g.group, 0] + [""] * 9
        return [g.group, g.n,
                _fmt(g.mean_error["left"]), _fmt(g.sd_error["left"]),
                g.mean_band["left"].value,
                _fmt(g.mean_error["right"]), _fmt(g.sd_error["right"]),
                g.mean_band["right"].value,
                _fmt(g.band_fractions[ErrorBand.ACCURATE]),
                _fmt(g.band_fractions[ErrorBand.MODERATE]),
                _fmt(g.band_fractions[ErrorBand.POOR])]

    _write_csv(out_dir / "gender_table.csv", group_header,
               [group_row(g) for g in report.gender_groups])
    _write_csv(out_dir / "age_table.csv", group_header,
               [group_row(g) for g in report.age_groups])

    for g in report.gender_groups + report.age_groups:
        for hip in HIPS:
            series = g.scatter.get(hip, [])
            _write_csv(out_dir / f"scatter_{g.group}_{hip}.csv",
                       ["patient_id", "truth_deg", "predicted_deg"],
                       [[pid, _fmt(t), _fmt(p)] for pid, t, p in series])

    _write_csv(out_dir / "histogram.csv",
               ["bin_lo", "bin_hi", "count", "mean_abs_error", "band"],
               [[_fmt(b.lo), _fmt(b.hi), b.count, _fmt(b.mean_abs_error),
                 b.band.value if b.band else ""] for b in report.histogram])

    if report.folds.notes:
        (out_dir / "footnotes.txt").write_text("\n".join(report.folds.notes) + "\n")

    if render_plots:
        emit_plots(report, out_dir / "plots")
    return out_dir


BAND_COLORS = {ErrorBand.ACCURATE: "#2e7d32", ErrorBand.MODERATE: "#f9a825",
               ErrorBand.POOR: "#c62828"}


def emit_plots(report: EvaluationReport, plots_dir: str | Path) -> None:
    """Render scatter, average-error bar and histogram images (non-contractual)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plots_dir = Path(plots_dir)
    plots_dir.mkdir(parents=True, exist_ok=True)

    for g in report.gender_groups + report.age_groups:
        if g.empty:
            continue
        fig, axes = plt.subplots(1, 2, figsize=(9, 4.2))
        for ax, hip in zip(axes, ("right", "left")):
            truths = [t for _, t, _ in g.scatter[hip]]
            preds = [p for _, _, p in g.scatter[hip]]
            band = g.mean_band[hip]
            ax.scatter(truths, preds, s=12, alpha=0.7,
                       color=BAND_COLORS[band], edgecolors="none")
            lo = min(truths + preds) - 2
            hi = max(truths + preds) + 2
            ax.plot([lo, hi], [lo, hi], "k--", linewidth=0.8)
            ax.set_xlabel(f"{hip} angle, ground truth (deg)")
            ax.set_ylabel(f"{hip} angle, predicted (deg)")
            ax.set_title(f"{g.group}: mean error {g.mean_error[hip]:.2f} deg ({band.value})")
        fig.tight_layout()
        fig.savefig(plots_dir / f"scatter_{g.group}.png", dpi=120)
        plt.close(fig)

    both = next(g for g in report.gender_groups if g.group == "both")
    if not both.empty:
        fig, ax = plt.subplots(figsize=(4.5, 4))
        hips = ["right", "left"]
        means = [both.mean_error[h] for h in hips]
        ax.bar(hips, means, color=[BAND_COLORS[both.mean_band[h]] for h in hips])
        ax.set_ylabel("mean absolute error (deg)")
        ax.set_title("average error, whole dataset")
        fig.tight_layout()
        fig.savefig(plots_dir / "average_error.png", dpi=120)
        plt.close(fig)

    if report.histogram:
        fig, ax = plt.subplots(figsize=(7, 4))
        for b in report.histogram:
            color = BAND_COLORS[b.band] if b.band else "#cccccc"
            ax.bar((b.lo + b.hi) / 2, b.count, width=(b.hi - b.lo) * 0.92, color=color)
        ax.set_xlabel("true angle (deg)")
        ax.set_ylabel("frequency")
        ax.set_title("angle histogram colored by mean error band")
        fig.tight_layout()
        fig.savefig(plots_dir / "histogram.png", dpi=120)
        plt.close(fig)
