"""Patient metadata ingestion, validation and demographic statistics.

The metadata table is a UTF-8 CSV with header
``patient_id,age_years,gender,right_angle_deg,left_angle_deg,image_file``;
gender is coded ``M``/``F`` and every image_file must resolve under the
image root. Records are immutable after ingestion and safe to share.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, EmptyDatasetError, IngestionError, SchemaError

REQUIRED_COLUMNS = (
    "patient_id",
    "age_years",
    "gender",
    "right_angle_deg",
    "left_angle_deg",
    "image_file",
)

DEFAULT_AGE_RANGE = (0.0, 120.0)
DEFAULT_ANGLE_RANGE = (-10.0, 50.0)
DEFAULT_AGE_BOUNDS = (0.0, 100.0)
DEFAULT_AGE_BINS = (45.0, 65.0)


class Gender(str, Enum):
    MALE = "M"
    FEMALE = "F"


@dataclass(frozen=True)
class PatientRecord:
    """One subject: identifier, demographics, ground-truth angles, image."""

    patient_id: str
    age_years: float
    gender: Gender
    right_angle_deg: float
    left_angle_deg: float
    image_path: Path


@dataclass(frozen=True)
class SummaryStat:
    """Mean and standard deviation of one variable within one group.

    ``sd_defined`` is False for singleton groups, where the sd is
    reported as 0.0 by convention.
    """

    mean: float
    sd: float
    sd_defined: bool = True


@dataclass(frozen=True)
class GroupStats:
    count: int
    age: SummaryStat
    right_angle: SummaryStat
    left_angle: SummaryStat


@dataclass(frozen=True)
class DatasetStats:
    """Per-group statistics over gender x age-band cells.

    Keys are ``(gender, band)`` where gender is ``"male"``, ``"female"`` or
    ``"all"`` and band is ``"all"`` or one of ``age_bin_labels(age_bins)``.
    """

    age_bins: tuple[float, ...]
    groups: dict[tuple[str, str], GroupStats]

    @property
    def total_count(self) -> int:
        return self.groups[("all", "all")].count


def ingest(metadata_table: str | Path, image_root: str | Path,
           age_range: tuple[float, float] = DEFAULT_AGE_RANGE,
           angle_range: tuple[float, float] = DEFAULT_ANGLE_RANGE,
           check_images: bool = True) -> list[PatientRecord]:
    """Read and validate the metadata CSV, returning records in table order.

    Raises SchemaError for a malformed header and IngestionError listing
    every offending patient_id for record-level problems (bad values,
    out-of-range age/angles, duplicate ids, missing or unreadable images).
    """
    metadata_table = Path(metadata_table)
    image_root = Path(image_root)
    with open(metadata_table, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{metadata_table}: empty file, expected a header row")
        missing = [c for c in REQUIRED_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise SchemaError(
                f"{metadata_table}: missing column(s) {', '.join(missing)}"
            )
        rows = list(reader)

    records: list[PatientRecord] = []
    problems: list[str] = []
    seen: set[str] = set()
    for lineno, row in enumerate(rows, start=2):
        pid = (row["patient_id"] or "").strip()
        if not pid:
            problems.append(f"line {lineno}: empty patient_id")
            continue
        if pid in seen:
            problems.append(f"{pid}: duplicate patient_id")
            continue
        seen.add(pid)

        try:
            age = float(row["age_years"])
            right = float(row["right_angle_deg"])
            left = float(row["left_angle_deg"])
        except (TypeError, ValueError):
            problems.append(f"{pid}: non-numeric age or angle")
            continue

        gender_code = (row["gender"] or "").strip().upper()
        try:
            gender = Gender(gender_code)
        except ValueError:
            problems.append(f"{pid}: gender must be M or F, got {row['gender']!r}")
            continue

        if not (age_range[0] <= age <= age_range[1]):
            problems.append(f"{pid}: age {age:g} outside plausible range {age_range}")
            continue
        bad_angle = False
        for name, value in (("right", right), ("left", left)):
            if not math.isfinite(value) or not (angle_range[0] <= value <= angle_range[1]):
                problems.append(
                    f"{pid}: {name} angle {value:g} outside plausible range {angle_range}"
                )
                bad_angle = True
        if bad_angle:
            continue

        image_path = image_root / row["image_file"]
        if not image_path.is_file():
            problems.append(f"{pid}: image file not found: {image_path}")
            continue
        if check_images:
            try:
                with Image.open(image_path):
                    pass
            except (UnidentifiedImageError, OSError):
                problems.append(f"{pid}: unreadable image: {image_path}")
                continue

        records.append(PatientRecord(pid, age, gender, right, left, image_path))

    if problems:
        raise IngestionError(
            f"{len(problems)} invalid record(s): " + "; ".join(problems)
        )
    return records


def age_bin_labels(age_bins: Sequence[float]) -> list[str]:
    """Human-readable labels for the bands induced by the bin edges."""
    edges = [float(e) for e in age_bins]
    if len(edges) == 0:
        return []
    labels = [f"le{edges[0]:g}"]
    for lo, hi in zip(edges[:-1], edges[1:]):
        labels.append(f"{lo:g}to{hi:g}")
    labels.append(f"ge{edges[-1]:g}")
    return labels


def age_bin_index(age: float, age_bins: Sequence[float]) -> int:
    """Assign an age to exactly one band.

    Edges e1 < ... < ek induce k+1 bands with the first band closed at e1
    and the last closed at ek (matching the printed labels ``<=e1`` and
    ``>=ek``): age <= e1 -> 0; e_i < age <= e_(i+1) for interior edges;
    e_(k-1) < age < ek -> k-1; age >= ek -> k.
    """
    edges = [float(e) for e in age_bins]
    if any(b >= a for b, a in zip(edges, edges[1:])):
        raise ConfigError(f"age bins must be strictly increasing, got {age_bins}")
    if not edges:
        return 0
    if age <= edges[0]:
        return 0
    if age >= edges[-1]:
        return len(edges)
    for i in range(len(edges) - 1):
        if age <= edges[i + 1]:
            # Exact hits on the last edge were handled above, so the open
            # right end of the final interior band is preserved.
            return i + 1
    return len(edges) - 1  # pragma: no cover - unreachable


def _summary(values: list[float], ddof: int) -> SummaryStat:
    n = len(values)
    mean = sum(values) / n
    if n <= ddof:
        return SummaryStat(mean=mean, sd=0.0, sd_defined=False)
    var = sum((v - mean) ** 2 for v in values) / (n - ddof)
    return SummaryStat(mean=mean, sd=math.sqrt(var))


def compute_stats(records: Sequence[PatientRecord],
                  age_bins: Sequence[float] = DEFAULT_AGE_BINS,
                  ddof: int = 1) -> DatasetStats:
    """Count/mean/SD of age and both angles per gender x age-band cell.

    ddof=1 (sample SD) by default; pass ddof=0 for the population
    convention. Raises EmptyDatasetError on no records.
    """
    if not records:
        raise EmptyDatasetError("compute_stats requires at least one record")
    edges = tuple(float(e) for e in age_bins)
    if any(b >= a for b, a in zip(edges, edges[1:])):
        raise ConfigError(f"age bins must be strictly increasing, got {age_bins}")
    labels = age_bin_labels(edges)

    buckets: dict[tuple[str, str], list[PatientRecord]] = {}
    for rec in records:
        gender_key = "male" if rec.gender is Gender.MALE else "female"
        band = labels[age_bin_index(rec.age_years, edges)] if labels else "all"
        for gk in (gender_key, "all"):
            keys = [(gk, "all")]
            if labels:
                keys.append((gk, band))
            for key in keys:
                buckets.setdefault(key, []).append(rec)

    groups = {
        key: GroupStats(
            count=len(recs),
            age=_summary([r.age_years for r in recs], ddof),
            right_angle=_summary([r.right_angle_deg for r in recs], ddof),
            left_angle=_summary([r.left_angle_deg for r in recs], ddof),
        )
        for key, recs in buckets.items()
    }
    return DatasetStats(age_bins=edges, groups=groups)


def normalize_age(age_years: float, bounds: tuple[float, float] = DEFAULT_AGE_BOUNDS) -> float:
    """Map an age onto [0, 1] linearly between the bounds, clamping outside."""
    lo, hi = bounds
    if lo >= hi:
        raise ConfigError(f"age bounds must satisfy lo < hi, got {bounds}")
    return min(1.0, max(0.0, (age_years - lo) / (hi - lo)))


def encode_gender(gender: Gender) -> float:
    """Male -> 1.0, female -> 0.0."""
    return 1.0 if gender is Gender.MALE else 0.0


def decode_gender(value: float) -> Gender:
    if value == 1.0:
        return Gender.MALE
    if value == 0.0:
        return Gender.FEMALE
    raise ValueError(f"encoded gender must be exactly 0.0 or 1.0, got {value!r}")


def normalize_angles(right_deg: float, left_deg: float, angle_max: float) -> tuple[float, float]:
    """Divide both angles by the training-fold maximum."""
    if angle_max <= 0:
        raise ConfigError(f"angle_max must be positive, got {angle_max}")
    return right_deg / angle_max, left_deg / angle_max


def denormalize_angles(right_norm: float, left_norm: float, angle_max: float) -> tuple[float, float]:
    if angle_max <= 0:
        raise ConfigError(f"angle_max must be positive, got {angle_max}")
    return right_norm * angle_max, left_norm * angle_max


def compute_angle_max(records: Iterable[PatientRecord]) -> float:
    """Largest angle over both hips; computed on the training fold only."""
    values = [v for r in records for v in (r.right_angle_deg, r.left_angle_deg)]
    if not values:
        raise EmptyDatasetError("cannot compute angle_max over zero records")
    angle_max = max(values)
    if angle_max <= 0:
        raise ConfigError(
            f"training-fold maximum angle is {angle_max:g}; max normalization needs a positive maximum"
        )
    return angle_max
