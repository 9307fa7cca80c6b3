"""Synthetic pelvis-like radiographs with geometrically encoded hip angles.

Each image is a mirror-symmetric arrangement of soft structures (body
oval, sacrum, pubic column, iliac wings, femoral heads) plus two bright
elliptical rim annuli. The in-plane rotation of each rim encodes that
hip's angle in degrees; the right-hip rim (image left, radiographic
convention) is the exact mirror of the left-hip template, so flipping an
image is pixel-identical to generating it with swapped labels (at zero
noise). Rims occlude the background and have a flat-topped profile, which
keeps the thresholded band nearly uniform for the moment-based decoder.

All fields are evaluated at pixel centers in coordinates centered on
(size-1)/2, so horizontal mirroring negates x exactly in floating point.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DecodeError
from .preprocess import ImagePlane, save_image_16bit

MIN_SIDE = 64
MAX_DECODABLE_NOISE = 0.05

# Intensity design (fractions of full scale). Background layers sum to
# < RIM_THRESHOLD - 4 sigma at the default noise; the rim core sits at
# RIM_LEVEL, well above it. Each rim is surrounded by a wider occluding
# "moat" at MOAT_LEVEL so the above-threshold band has uniform local
# background, which keeps the moment-based decoder unbiased.
BASE_LEVEL = 0.06
RIM_LEVEL = 0.85
MOAT_LEVEL = 0.30
RIM_THRESHOLD = 0.55
RIM_SHARPNESS = 0.16  # super-Gaussian half-width of the annulus in d-units
MOAT_SHARPNESS = 3.0 * RIM_SHARPNESS

# Rim geometry as fractions of the image side.
RIM_CENTER_X = 0.21
RIM_CENTER_Y = 0.06
RIM_SEMI_MAJOR = 0.11
RIM_SEMI_MINOR = 0.066


@dataclass
class GenderModel:
    """Sampling parameters for one gender."""

    age_mean: float
    age_sd: float
    right_mean: float
    right_sd: float
    left_mean: float
    left_sd: float


@dataclass
class PhantomSpec:
    population: int = 300
    gender_ratio: tuple[int, int] = (244, 56)  # male : female
    male: GenderModel = field(default_factory=lambda: GenderModel(
        age_mean=37.72, age_sd=16.01,
        right_mean=16.54, right_sd=5.28,
        left_mean=16.11, left_sd=5.43))
    female: GenderModel = field(default_factory=lambda: GenderModel(
        age_mean=46.95, age_sd=16.39,
        right_mean=20.61, right_sd=5.70,
        left_mean=19.55, left_sd=5.20))
    age_clip: tuple[float, float] = (13.0, 92.0)
    angle_clip: tuple[float, float] = (-10.0, 50.0)
    # Linear shift of the angle mean with age, degrees per year, centered
    # on the per-gender mean age; chosen so the <=45 / 45-65 / >=65 bands
    # show the increasing trend seen in adult cohorts.
    age_angle_drift: float = 0.09
    side: int = 256
    noise_level: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.side < MIN_SIDE:
            raise ConfigError(f"phantom side must be >= {MIN_SIDE}, got {self.side}")
        if self.population < 1:
            raise ConfigError("population must be >= 1")
        if self.noise_level < 0:
            raise ConfigError("noise_level must be >= 0")
        if sum(self.gender_ratio) <= 0 or min(self.gender_ratio) < 0:
            raise ConfigError(f"bad gender ratio {self.gender_ratio}")


def _centered_grid(side: int) -> tuple[np.ndarray, np.ndarray]:
    c = (side - 1) / 2.0
    y, x = np.mgrid[0:side, 0:side]
    return x - c, y - c


def _soft_ellipse(x, y, cx, cy, ax, ay, edge=0.10):
    d = np.sqrt(((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2)
    return 1.0 / (1.0 + np.exp((d - 1.0) / edge))


def _rim_masks(x, y, cx, cy, side, angle_deg, mirrored):
    """Flat-topped annulus membership and its occluding moat for one rim.

    The template's major axis lies along +x at angle 0 and rotates CCW
    (y measured upward) by angle_deg. A mirrored rim is the template
    evaluated at negated horizontal offsets.
    """
    dx = x - cx
    dyu = -(y - cy)  # array rows grow downward; flip to y-up
    if mirrored:
        dx = -dx
    th = math.radians(angle_deg)
    ct, st = math.cos(th), math.sin(th)
    xr = ct * dx + st * dyu
    yr = -st * dx + ct * dyu
    a = RIM_SEMI_MAJOR * side
    b = RIM_SEMI_MINOR * side
    d = np.sqrt((xr / a) ** 2 + (yr / b) ** 2)
    band = np.exp(-(((d - 1.0) / RIM_SHARPNESS) ** 4))
    moat = np.exp(-(((d - 1.0) / MOAT_SHARPNESS) ** 4))
    return band, moat


def render(side: int, right_deg: float, left_deg: float,
           noise_level: float = 0.0,
           rng: np.random.Generator | None = None) -> np.ndarray:
    """Render one phantom as a [0, 1] float image.

    Right hip appears on the image's left half (radiographic convention)
    as the mirrored template; left hip on the right half.
    """
    s = float(side)
    x, y = _centered_grid(side)

    # Mirror-paired structures are summed pairwise before accumulating so
    # the background field is bitwise mirror-symmetric (float addition is
    # commutative but not associative).
    bg = np.full((side, side), BASE_LEVEL)
    bg += 0.14 * _soft_ellipse(x, y, 0.0, 0.02 * s, 0.46 * s, 0.42 * s)
    bg += 0.16 * _soft_ellipse(x, y, 0.0, -0.20 * s, 0.09 * s, 0.12 * s, edge=0.12)
    bg += 0.14 * _soft_ellipse(x, y, 0.0, 0.24 * s, 0.025 * s, 0.10 * s, edge=0.15)
    bg += 0.16 * (_soft_ellipse(x, y, -0.25 * s, -0.14 * s, 0.15 * s, 0.11 * s)
                  + _soft_ellipse(x, y, 0.25 * s, -0.14 * s, 0.15 * s, 0.11 * s))
    bg += 0.18 * (_soft_ellipse(x, y, -0.30 * s, 0.14 * s, 0.07 * s, 0.07 * s, edge=0.08)
                  + _soft_ellipse(x, y, 0.30 * s, 0.14 * s, 0.07 * s, 0.07 * s, edge=0.08))

    band_r, moat_r = _rim_masks(x, y, -RIM_CENTER_X * s, RIM_CENTER_Y * s, side,
                                right_deg, mirrored=True)
    band_l, moat_l = _rim_masks(x, y, RIM_CENTER_X * s, RIM_CENTER_Y * s, side,
                                left_deg, mirrored=False)
    band = np.clip(band_r + band_l, 0.0, 1.0)
    moat = np.clip(moat_r + moat_l, 0.0, 1.0)

    img = bg * (1.0 - moat) + MOAT_LEVEL * moat + (RIM_LEVEL - MOAT_LEVEL) * band
    if noise_level > 0:
        if rng is None:
            raise ConfigError("noise_level > 0 requires an rng")
        img = img + rng.normal(0.0, noise_level, img.shape)
    return np.clip(img, 0.0, 1.0)


def _half_orientation_deg(values01: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    """Principal-axis orientation (degrees CCW, y-up) of the above-threshold
    rim band via intensity-weighted second moments."""
    w = np.clip(values01 - RIM_THRESHOLD, 0.0, None)
    mass = w.sum()
    if mass < 1.0 or (w > 0).sum() < 10:
        raise DecodeError("rim not found above intensity threshold")
    yu = -y
    xbar = (w * x).sum() / mass
    ybar = (w * yu).sum() / mass
    mu20 = (w * (x - xbar) ** 2).sum() / mass
    mu02 = (w * (yu - ybar) ** 2).sum() / mass
    mu11 = (w * (x - xbar) * (yu - ybar)).sum() / mass
    return math.degrees(0.5 * math.atan2(2.0 * mu11, mu20 - mu02))


def reference_decode(image: ImagePlane) -> tuple[float, float]:
    """Recover (right_deg, left_deg) from a generated phantom.

    Independent of the learned model: segments each half's rim band and
    reads the orientation from second moments. Accurate to ~0.5 degrees
    for angles within the generator's clip range at default noise.
    """
    v = image.values.astype(np.float64)
    if image.value_range is not None and image.value_range[1] > 0:
        v = v / image.value_range[1]
    side_h, side_w = v.shape
    c = (side_w - 1) / 2.0
    y, x = np.mgrid[0:side_h, 0:side_w]
    x = x - c
    y = y - (side_h - 1) / 2.0
    half = side_w // 2

    theta_left_half = _half_orientation_deg(v[:, :half], x[:, :half], y[:, :half])
    theta_right_half = _half_orientation_deg(v[:, half:], x[:, half:], y[:, half:])
    return -theta_left_half, theta_right_half


def sample_population(spec: PhantomSpec) -> list[dict]:
    """Draw the demographic rows (no images) for a phantom population."""
    rng = np.random.default_rng(spec.seed)
    n_male = round(spec.population * spec.gender_ratio[0] / sum(spec.gender_ratio))
    n_female = spec.population - n_male

    rows = []
    for gender, model, count in (("M", spec.male, n_male), ("F", spec.female, n_female)):
        ages = np.clip(rng.normal(model.age_mean, model.age_sd, count), *spec.age_clip)
        drift = spec.age_angle_drift * (ages - model.age_mean)
        rights = np.clip(rng.normal(model.right_mean, model.right_sd, count) + drift,
                         *spec.angle_clip)
        lefts = np.clip(rng.normal(model.left_mean, model.left_sd, count) + drift,
                        *spec.angle_clip)
        for a, r, l in zip(ages, rights, lefts):
            rows.append({"gender": gender, "age_years": float(a),
                         "right_angle_deg": float(r), "left_angle_deg": float(l)})

    order = rng.permutation(len(rows))
    rows = [rows[i] for i in order]
    for i, row in enumerate(rows, start=1):
        row["patient_id"] = f"P{i:04d}"
        row["image_file"] = f"P{i:04d}.png"
    return rows


def generate(spec: PhantomSpec, out_dir: str | Path) -> Path:
    """Write the phantom population under out_dir/{images/*.png, metadata.csv}.

    Deterministic: the same spec (seed included) reproduces identical
    image bytes and CSV. Returns the metadata path.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    rows = sample_population(spec)
    noise_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    for row in rows:
        img = render(spec.side, row["right_angle_deg"], row["left_angle_deg"],
                     noise_level=spec.noise_level, rng=noise_rng)
        save_image_16bit(images_dir / row["image_file"], img)

    metadata = out_dir / "metadata.csv"
    with open(metadata, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "age_years", "gender",
                         "right_angle_deg", "left_angle_deg", "image_file"])
        for row in rows:
            writer.writerow([row["patient_id"], repr(row["age_years"]), row["gender"],
                             repr(row["right_angle_deg"]), repr(row["left_angle_deg"]),
                             row["image_file"]])
    return metadata
