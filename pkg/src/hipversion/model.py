"""The regression network and its serializable bundle.

Graph: tripled radiograph -> VGG-style conv stack -> batch norm ->
1x1-conv attention branch ending in a sigmoid gate -> gated global
average pooling rescaled by the pooled gate -> concat one age neuron and
one gender neuron -> dropout -> dense -> dropout -> linear 2-output head
(normalized right and left angles).

A ModelBundle couples the network with the constants needed to map raw
inputs to degrees (input side, angle_max, age bounds, channel stats) and
serializes to a single zip archive: manifest.json + weights.npz keyed by
layer name.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import BundleError, BundleIntegrityError, ConfigError, DataError
from .preprocess import ModelInput

BUNDLE_FORMAT_VERSION = 1

# Convolutional stacks: one tuple of conv widths per pooling block.
BACKBONE_PRESETS: dict[str, tuple[tuple[int, ...], ...]] = {
    "vgg16": ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512)),
}


@dataclass
class BackboneSpec:
    """Conv-stack architecture, weight init and trainability."""

    architecture: str = "vgg16"
    blocks: tuple[tuple[int, ...], ...] | None = None
    weight_init: str = "random"  # "random" | "pretrained-file"
    pretrained_path: str | None = None
    trainable: bool = True

    def resolved_blocks(self) -> tuple[tuple[int, ...], ...]:
        if self.blocks is not None:
            return tuple(tuple(int(w) for w in blk) for blk in self.blocks)
        if self.architecture not in BACKBONE_PRESETS:
            raise ConfigError(
                f"unknown backbone architecture {self.architecture!r} and no explicit blocks"
            )
        return BACKBONE_PRESETS[self.architecture]

    @property
    def downsample_factor(self) -> int:
        return 2 ** len(self.resolved_blocks())

    @property
    def out_channels(self) -> int:
        return self.resolved_blocks()[-1][-1]


@dataclass
class AttentionHeadSpec:
    """Attention-branch widths, head dense width and dropout rate."""

    attn_widths: tuple[int, ...] = (64, 16)
    dense_width: int = 1024
    dropout: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.dense_width < 1 or any(w < 1 for w in self.attn_widths):
            raise ConfigError("attention/head widths must be positive")


class VggBackbone(nn.Module):
    """Stacked 3x3 conv + ReLU blocks, each followed by 2x2 max pooling.

    State-dict keys follow block{i}_conv{j}.{weight,bias}; pretrained
    weight files use the same names.
    """

    def __init__(self, blocks: Sequence[Sequence[int]], in_channels: int = 3):
        super().__init__()
        layers: "OrderedDict[str, nn.Module]" = OrderedDict()
        c_in = in_channels
        for bi, block in enumerate(blocks, start=1):
            for ci, width in enumerate(block, start=1):
                layers[f"block{bi}_conv{ci}"] = nn.Conv2d(c_in, width, 3, padding=1)
                layers[f"block{bi}_relu{ci}"] = nn.ReLU()
                c_in = width
            layers[f"block{bi}_pool"] = nn.MaxPool2d(2)
        self.stack = nn.Sequential(layers)
        self.out_channels = c_in

    def forward(self, x):
        return self.stack(x)


def attention_pool(features: torch.Tensor, gate: torch.Tensor) -> torch.Tensor:
    """Gated global average pooling with the pooled-gate rescale.

    pooled_c = sum_xy(f_c * g) / sum_xy(g); a uniform positive gate
    reduces this to plain global average pooling, and a one-hot gate
    selects the feature vector at that pixel.
    """
    num = (features * gate).sum(dim=(2, 3))
    den = gate.sum(dim=(2, 3)).clamp_min(torch.finfo(features.dtype).tiny)
    return num / den


class AttentionGatedRegressor(nn.Module):
    def __init__(self, backbone_spec: BackboneSpec, head_spec: AttentionHeadSpec,
                 input_side: int):
        super().__init__()
        blocks = backbone_spec.resolved_blocks()
        factor = 2 ** len(blocks)
        if input_side % factor != 0 or input_side < factor:
            raise ConfigError(
                f"input side {input_side} must be a positive multiple of {factor} "
                f"(one halving per conv block); expected feature map "
                f"{input_side}/{factor} x {input_side}/{factor}"
            )
        self.input_side = input_side
        self.backbone = VggBackbone(blocks)
        channels = self.backbone.out_channels
        self.feature_norm = nn.BatchNorm2d(channels)

        attn: "OrderedDict[str, nn.Module]" = OrderedDict()
        c_in = channels
        for i, width in enumerate(head_spec.attn_widths, start=1):
            attn[f"conv{i}"] = nn.Conv2d(c_in, width, 1)
            attn[f"relu{i}"] = nn.ReLU()
            c_in = width
        attn["gate_conv"] = nn.Conv2d(c_in, 1, 1)
        attn["gate"] = nn.Sigmoid()
        self.attention = nn.Sequential(attn)

        self.age_neuron = nn.Linear(1, 1)
        self.gender_neuron = nn.Linear(1, 1)
        self.dropout1 = nn.Dropout(head_spec.dropout)
        self.dense = nn.Linear(channels + 2, head_spec.dense_width)
        self.dropout2 = nn.Dropout(head_spec.dropout)
        self.head_out = nn.Linear(head_spec.dense_width, 2)

    def forward(self, images: torch.Tensor, ages: torch.Tensor,
                genders: torch.Tensor) -> torch.Tensor:
        f = self.feature_norm(self.backbone(images))
        gate = self.attention(f)
        pooled = attention_pool(f, gate)
        aux = torch.cat([self.age_neuron(ages.unsqueeze(1)),
                         self.gender_neuron(genders.unsqueeze(1))], dim=1)
        h = torch.cat([pooled, aux], dim=1)
        h = self.dropout1(h)
        h = torch.relu(self.dense(h))
        h = self.dropout2(h)
        return self.head_out(h)


@dataclass
class ModelBundle:
    """Network plus everything needed to turn raw samples into degrees."""

    backbone_spec: BackboneSpec
    head_spec: AttentionHeadSpec
    input_side: int
    network: AttentionGatedRegressor
    age_bounds: tuple[float, float] = (0.0, 100.0)
    channel_mean: tuple[float, float, float] | None = None
    channel_std: tuple[float, float, float] | None = None
    angle_max: float | None = None
    config_digest: str = ""
    dtype: str = "float32"


def load_pretrained_backbone(backbone: VggBackbone, path: str | Path) -> None:
    """Load conv weights from an .npz keyed block{i}_conv{j}.{weight,bias}."""
    try:
        arrays = np.load(path)
    except Exception as exc:
        raise BundleError(f"cannot read pretrained weights {path}: {exc}") from exc
    state = backbone.stack.state_dict()
    missing = [k for k in state if k not in arrays.files]
    if missing:
        raise BundleError(f"pretrained weights {path} missing layers: {missing}")
    for key in state:
        arr = arrays[key]
        if tuple(arr.shape) != tuple(state[key].shape):
            raise BundleError(
                f"pretrained layer {key} has shape {arr.shape}, expected {tuple(state[key].shape)}"
            )
        state[key] = torch.from_numpy(np.array(arr))
    backbone.stack.load_state_dict(state)


def build(backbone_spec: BackboneSpec, head_spec: AttentionHeadSpec,
          input_side: int, seed: int = 0,
          age_bounds: tuple[float, float] = (0.0, 100.0),
          channel_mean: tuple[float, float, float] | None = None,
          channel_std: tuple[float, float, float] | None = None,
          config_digest: str = "", dtype: str = "float32") -> ModelBundle:
    """Construct the network with seeded initialization."""
    torch.manual_seed(seed)
    network = AttentionGatedRegressor(backbone_spec, head_spec, input_side)
    if backbone_spec.weight_init == "pretrained-file":
        if not backbone_spec.pretrained_path:
            raise ConfigError("weight_init 'pretrained-file' requires pretrained_path")
        load_pretrained_backbone(network.backbone, backbone_spec.pretrained_path)
    elif backbone_spec.weight_init != "random":
        raise ConfigError(f"unknown weight_init {backbone_spec.weight_init!r}")
    if not backbone_spec.trainable:
        for p in network.backbone.parameters():
            p.requires_grad_(False)
    if dtype == "float64":
        network.double()
    elif dtype != "float32":
        raise ConfigError(f"unsupported dtype {dtype!r}")
    network.eval()
    return ModelBundle(backbone_spec=backbone_spec, head_spec=head_spec,
                       input_side=input_side, network=network,
                       age_bounds=age_bounds, channel_mean=channel_mean,
                       channel_std=channel_std, config_digest=config_digest,
                       dtype=dtype)


def batch_tensors(bundle: ModelBundle, inputs: Sequence[ModelInput]):
    """Validate a batch of ModelInputs and stack them into tensors."""
    if not inputs:
        raise DataError("empty batch")
    side = bundle.input_side
    for i, mi in enumerate(inputs):
        if mi.image.shape[0] != side or mi.image.shape[1] != side:
            raise DataError(
                f"batch item {i}: image is {mi.image.shape[0]}x{mi.image.shape[1]}, "
                f"bundle expects {side}x{side}"
            )
        if not np.isfinite(mi.image).all():
            raise DataError(f"batch item {i}: non-finite image values")
    torch_dtype = torch.float64 if bundle.dtype == "float64" else torch.float32
    images = torch.from_numpy(
        np.ascontiguousarray(np.stack([mi.image for mi in inputs]).transpose(0, 3, 1, 2))
    ).to(torch_dtype)
    ages = torch.tensor([mi.aux_age for mi in inputs], dtype=torch_dtype)
    genders = torch.tensor([mi.aux_gender for mi in inputs], dtype=torch_dtype)
    return images, ages, genders


def forward(bundle: ModelBundle, inputs: Sequence[ModelInput]) -> np.ndarray:
    """Deterministic evaluation-mode forward pass; returns (B, 2) of
    (right_norm, left_norm)."""
    images, ages, genders = batch_tensors(bundle, inputs)
    bundle.network.eval()
    with torch.no_grad():
        out = bundle.network(images, ages, genders)
    result = out.cpu().numpy()
    if not np.isfinite(result).all():
        raise DataError("model produced non-finite outputs")
    return result


def predict_degrees(bundle: ModelBundle, inputs: Sequence[ModelInput]) -> np.ndarray:
    """Forward pass denormalized to degrees via the stored angle_max."""
    if bundle.angle_max is None:
        raise BundleIntegrityError("bundle has no angle_max; train it or load a trained bundle")
    return forward(bundle, inputs) * bundle.angle_max


def save_bundle(bundle: ModelBundle, path: str | Path) -> None:
    manifest = {
        "format_version": BUNDLE_FORMAT_VERSION,
        "backbone": {
            "architecture": bundle.backbone_spec.architecture,
            "blocks": [list(b) for b in bundle.backbone_spec.resolved_blocks()],
            "weight_init": bundle.backbone_spec.weight_init,
            "pretrained_path": bundle.backbone_spec.pretrained_path,
            "trainable": bundle.backbone_spec.trainable,
        },
        "head": asdict(bundle.head_spec) | {"attn_widths": list(bundle.head_spec.attn_widths)},
        "input_side": bundle.input_side,
        "age_bounds": list(bundle.age_bounds),
        "channel_mean": list(bundle.channel_mean) if bundle.channel_mean else None,
        "channel_std": list(bundle.channel_std) if bundle.channel_std else None,
        "angle_max": bundle.angle_max,
        "config_digest": bundle.config_digest,
        "dtype": bundle.dtype,
    }
    weights = {k: v.cpu().numpy() for k, v in bundle.network.state_dict().items()}
    buf = io.BytesIO()
    np.savez(buf, **weights)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        zf.writestr("weights.npz", buf.getvalue())


def load_bundle(path: str | Path) -> ModelBundle:
    try:
        with zipfile.ZipFile(path) as zf:
            names = set(zf.namelist())
            if "manifest.json" not in names or "weights.npz" not in names:
                raise BundleError(f"{path}: not a model bundle (missing manifest or weights)")
            manifest = json.loads(zf.read("manifest.json"))
            weights = np.load(io.BytesIO(zf.read("weights.npz")))
            arrays = {k: weights[k] for k in weights.files}
    except zipfile.BadZipFile as exc:
        raise BundleError(f"{path}: corrupt or truncated bundle archive") from exc
    except json.JSONDecodeError as exc:
        raise BundleError(f"{path}: corrupt manifest") from exc

    version = manifest.get("format_version")
    if version != BUNDLE_FORMAT_VERSION:
        raise BundleError(
            f"{path}: bundle format version {version!r} unsupported "
            f"(expected {BUNDLE_FORMAT_VERSION})"
        )
    b = manifest["backbone"]
    backbone_spec = BackboneSpec(
        architecture=b["architecture"],
        blocks=tuple(tuple(w) for w in b["blocks"]),
        weight_init=b["weight_init"],
        pretrained_path=b.get("pretrained_path"),
        trainable=b["trainable"],
    )
    head_spec = AttentionHeadSpec(
        attn_widths=tuple(manifest["head"]["attn_widths"]),
        dense_width=manifest["head"]["dense_width"],
        dropout=manifest["head"]["dropout"],
    )
    bundle = build(
        backbone_spec, head_spec, manifest["input_side"],
        age_bounds=tuple(manifest["age_bounds"]),
        channel_mean=tuple(manifest["channel_mean"]) if manifest.get("channel_mean") else None,
        channel_std=tuple(manifest["channel_std"]) if manifest.get("channel_std") else None,
        config_digest=manifest.get("config_digest", ""),
        dtype=manifest.get("dtype", "float32"),
    )
    bundle.angle_max = manifest.get("angle_max")
    state = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
    try:
        bundle.network.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise BundleError(f"{path}: weights do not match manifest architecture: {exc}") from exc
    bundle.network.eval()
    return bundle


def config_digest_of(payload: dict) -> str:
    """Stable short digest of a resolved configuration mapping."""
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
