"""Radiograph preprocessing and training-time augmentation.

Pipeline per image: load -> rescale to a square side -> per-image min-max
intensity normalization -> (training only) shift/zoom/mirror augmentation
on the single-channel plane -> channel tripling (+ optional per-channel
affine for backbones that expect channel statistics).

Resampling is bilinear with half-pixel-center coordinates and edge
clamping; edge clamping doubles as the "nearest" fill for out-of-frame
pixels. Shift and zoom are axis-aligned, so resampling is separable.
Rotation is never applied: the transform set has no rotation parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import ClassVar

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

DEFAULT_SIDE = 1024


@dataclass
class ImagePlane:
    """A 2-D grayscale intensity grid plus value-range metadata."""

    values: np.ndarray
    value_range: tuple[float, float] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.size == 0:
            raise DataError(
                f"image plane must be a nonempty 2-D grid, got shape {self.values.shape}"
            )
        if not np.isfinite(self.values).all():
            raise DataError("image plane contains non-finite values")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class ModelInput:
    """One network sample: tripled image channels plus the two aux scalars."""

    image: np.ndarray  # (H, W, 3)
    aux_age: float
    aux_gender: float

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"model input image must be HxWx3, got {self.image.shape}")
        if not (0.0 <= self.aux_age <= 1.0):
            raise DataError(f"aux_age must lie in [0, 1], got {self.aux_age}")
        if self.aux_gender not in (0.0, 1.0):
            raise DataError(f"aux_gender must be 0.0 or 1.0, got {self.aux_gender}")


@dataclass
class LabeledSample:
    """Single-channel plane with its right/left angle labels; the unit the
    augmenter operates on (tripling happens after augmentation)."""

    plane: ImagePlane
    right_deg: float
    left_deg: float


@dataclass
class AugmentationPolicy:
    """Shift/zoom ranges as fractions, nearest fill, optional mirroring.

    Rotation is structurally impossible, not merely disabled.
    """

    shift_range: float = 0.05
    zoom_range: float = 0.05
    fill_mode: str = "nearest"
    mirror_probability: float = 0.5

    rotation_forbidden: ClassVar[bool] = True

    def __post_init__(self):
        if self.shift_range < 0 or self.zoom_range < 0:
            raise ConfigError("shift_range and zoom_range must be >= 0")
        if self.zoom_range >= 1.0:
            raise ConfigError("zoom_range must be < 1")
        if not (0.0 <= self.mirror_probability <= 1.0):
            raise ConfigError("mirror_probability must lie in [0, 1]")
        if self.fill_mode != "nearest":
            raise ConfigError(f"unsupported fill_mode {self.fill_mode!r}")

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(shift_range=0.0, zoom_range=0.0, mirror_probability=0.0)


def load_image(path: str | Path) -> ImagePlane:
    """Read an 8- or 16-bit single-channel PNG/TIFF into an ImagePlane."""
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        value_range = (0.0, 255.0)
    elif arr.dtype in (np.uint16, np.int32):
        value_range = (0.0, 65535.0)
    else:
        value_range = (float(arr.min()), float(max(arr.max(), 1)))
    return ImagePlane(values=arr.astype(np.float64), value_range=value_range)


def save_image_16bit(path: str | Path, values01: np.ndarray) -> None:
    """Write a [0, 1] float grid as a 16-bit grayscale PNG."""
    arr = np.round(np.clip(values01, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path)


def _interp_axis(arr: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    """Bilinear gather along one axis at fractional, edge-clamped coords."""
    n = arr.shape[axis]
    c = np.clip(coords, 0.0, float(n - 1))
    i0 = np.floor(c).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    w = c - i0
    shape = [1, 1]
    shape[axis] = len(coords)
    w = w.reshape(shape)
    return np.take(arr, i0, axis=axis) * (1.0 - w) + np.take(arr, i1, axis=axis) * w


def resample_plane(values: np.ndarray, row_coords: np.ndarray, col_coords: np.ndarray) -> np.ndarray:
    out = _interp_axis(values, row_coords, axis=0)
    return _interp_axis(out, col_coords, axis=1)


def rescale(image: ImagePlane, side: int = DEFAULT_SIDE) -> ImagePlane:
    """Direct (non aspect-preserving) bilinear resize to side x side.

    Output pixel centers map to input coordinates via the half-pixel
    convention src = (dst + 0.5) * (n_in / n_out) - 0.5.
    """
    if side <= 0:
        raise ConfigError(f"rescale side must be positive, got {side}")
    h, w = image.values.shape
    rows = (np.arange(side) + 0.5) * (h / side) - 0.5
    cols = (np.arange(side) + 0.5) * (w / side) - 0.5
    return ImagePlane(values=resample_plane(image.values, rows, cols),
                      value_range=image.value_range)


def normalize_intensity(image: ImagePlane) -> ImagePlane:
    """Per-image min-max map to [0, 1]; a constant image maps to zeros."""
    v = image.values
    lo = v.min()
    hi = v.max()
    if hi == lo:
        out = np.zeros_like(v, dtype=np.float64)
    else:
        out = (v - lo) / (hi - lo)
    return ImagePlane(values=out, value_range=(0.0, 1.0))


def triple_channels(image: ImagePlane) -> np.ndarray:
    """Replicate the grayscale plane into three identical channels (H, W, 3)."""
    return np.repeat(image.values[:, :, None], 3, axis=2)


def mirror_sample(image: ImagePlane, right_deg: float, left_deg: float) -> tuple[ImagePlane, float, float]:
    """Flip about the vertical axis and swap the right/left labels."""
    flipped = ImagePlane(values=image.values[:, ::-1].copy(), value_range=image.value_range)
    return flipped, left_deg, right_deg


def to_model_input(plane: ImagePlane, aux_age: float, aux_gender: float,
                   channel_mean: tuple[float, float, float] | None = None,
                   channel_std: tuple[float, float, float] | None = None) -> ModelInput:
    """Triple channels and optionally apply a per-channel affine
    (x - mean) / std for backbones pretrained with channel statistics."""
    img = triple_channels(plane)
    if channel_mean is not None or channel_std is not None:
        mean = np.asarray(channel_mean if channel_mean is not None else (0.0, 0.0, 0.0))
        std = np.asarray(channel_std if channel_std is not None else (1.0, 1.0, 1.0))
        if np.any(std == 0):
            raise ConfigError("channel_std entries must be nonzero")
        img = (img - mean[None, None, :]) / std[None, None, :]
    return ModelInput(image=img, aux_age=aux_age, aux_gender=aux_gender)


def augment(sample: LabeledSample, policy: AugmentationPolicy,
            rng: np.random.Generator) -> LabeledSample:
    """Random height/width shift and isotropic zoom, each drawn uniformly
    from its +-range, nearest-edge fill, then mirroring (with label swap)
    with the policy's probability.

    Four variates are consumed per call in a fixed order regardless of the
    range values, so a zero-range policy is the identity transform while
    keeping the RNG stream aligned across policy variants.
    """
    plane, right, left = sample.plane, sample.right_deg, sample.left_deg
    h, w = plane.values.shape

    dy = rng.uniform(-policy.shift_range, policy.shift_range) * h
    dx = rng.uniform(-policy.shift_range, policy.shift_range) * w
    zoom = rng.uniform(1.0 - policy.zoom_range, 1.0 + policy.zoom_range)
    mirror_draw = rng.random()

    if dy != 0.0 or dx != 0.0 or zoom != 1.0:
        cy = (h - 1) / 2.0
        cx = (w - 1) / 2.0
        rows = (np.arange(h) - cy) / zoom + cy - dy
        cols = (np.arange(w) - cx) / zoom + cx - dx
        plane = ImagePlane(values=resample_plane(plane.values, rows, cols),
                           value_range=plane.value_range)

    if mirror_draw < policy.mirror_probability:
        plane, right, left = mirror_sample(plane, right, left)

    return replace(sample, plane=plane, right_deg=right, left_deg=left)
