"""Optimizer, learning-rate schedule, loss and the training loop.

The optimizer is Nesterov-accelerated Adam: the update direction blends
the bias-corrected first moment (corrected one step ahead) with the
bias-corrected current gradient, divided by the bias-corrected root
second moment plus eps. The schedule multiplies the learning rate by a
fixed factor whenever the monitored validation loss has not improved by
more than min_delta for a full patience window, never dropping below the
floor. The loop keeps the weights of the epoch with the lowest
validation loss.
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ConfigError, DataError, NonFiniteGradientError, TrainingDivergedError
from .model import ModelBundle, batch_tensors
from .preprocess import (AugmentationPolicy, ImagePlane, LabeledSample, augment,
                         load_image, normalize_intensity, rescale, to_model_input)
from .records import (PatientRecord, compute_angle_max, encode_gender,
                      normalize_age, normalize_angles)


def mse_loss(pred, target) -> torch.Tensor:
    """Mean of squared differences over all 2*B output components."""
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target)
    if pred.shape != target.shape:
        raise DataError(f"mse_loss shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


class Nadam(torch.optim.Optimizer):
    """Nesterov-accelerated Adam with constant momentum.

    Per parameter with gradient g at step t (1-based):
        m <- b1*m + (1-b1)*g
        n <- b2*n + (1-b2)*g^2
        update = lr * (b1*m/(1-b1^(t+1)) + (1-b1)*g/(1-b1^t))
                    / (sqrt(n/(1-b2^t)) + eps)

    ``names`` maps parameter tensors to display names for non-finite
    gradient diagnostics.
    """

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 names: dict | None = None):
        if lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        defaults = dict(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        super().__init__(params, defaults)
        self._names = {id(p): n for p, n in (names or {}).items()}

    @classmethod
    def from_model(cls, model: torch.nn.Module, lr: float = 1e-3, **kwargs) -> "Nadam":
        named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
        return cls([p for _, p in named], lr=lr,
                   names={p: n for n, p in named}, **kwargs)

    @torch.no_grad()
    def step(self, closure: Callable | None = None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            lr, b1, b2, eps = group["lr"], group["beta1"], group["beta2"], group["eps"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                if not torch.isfinite(g).all():
                    raise NonFiniteGradientError(
                        self._names.get(id(p), f"<param shape {tuple(p.shape)}>"))
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["m"] = torch.zeros_like(p)
                    state["n"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                m, n = state["m"], state["n"]
                m.mul_(b1).add_(g, alpha=1.0 - b1)
                n.mul_(b2).addcmul_(g, g, value=1.0 - b2)
                m_bar = m * (b1 / (1.0 - b1 ** (t + 1))) + g * ((1.0 - b1) / (1.0 - b1 ** t))
                n_hat = n / (1.0 - b2 ** t)
                p.addcdiv_(m_bar, n_hat.sqrt().add_(eps), value=-lr)
        return loss


@dataclass
class PlateauSchedule:
    """Reduce-on-plateau learning-rate policy with rolling patience.

    The first observation seeds the best-loss baseline; afterwards an
    epoch counts as stalled when it fails to beat the best loss by more
    than min_delta. After ``patience`` consecutive stalled epochs the lr
    is multiplied by ``factor`` (clamped at ``floor``) and the stall
    counter resets. The lr sequence is nonincreasing and >= floor.
    """

    base_lr: float = 1e-3
    factor: float = 0.8
    patience: int = 30
    min_delta: float = 1e-4
    floor: float = 1e-4

    lr: float = field(init=False)
    best: float = field(init=False, default=math.inf)
    stalled: int = field(init=False, default=0)

    def __post_init__(self):
        if not (0.0 < self.factor < 1.0):
            raise ConfigError(f"factor must lie in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.floor > self.base_lr:
            raise ConfigError(
                f"floor {self.floor} exceeds base learning rate {self.base_lr}")
        self.lr = self.base_lr

    def step(self, monitored_loss: float) -> float:
        """Record one epoch's monitored loss; returns the lr to use next."""
        if monitored_loss < self.best - self.min_delta:
            self.best = monitored_loss
            self.stalled = 0
        else:
            self.stalled += 1
            if self.stalled >= self.patience:
                self.lr = max(self.lr * self.factor, self.floor)
                self.stalled = 0
        return self.lr


@dataclass
class TrainRunConfig:
    epochs: int = 1000
    batch_size: int = 8
    seed: int = 0
    base_lr: float = 1e-3
    lr_factor: float = 0.8
    lr_patience: int = 30
    lr_min_delta: float = 1e-4
    lr_floor: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    cache_images: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    def make_schedule(self) -> PlateauSchedule:
        return PlateauSchedule(base_lr=self.base_lr, factor=self.lr_factor,
                               patience=self.lr_patience,
                               min_delta=self.lr_min_delta, floor=self.lr_floor)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    wall_time_s: float

    def to_json(self) -> str:
        return json.dumps({"epoch": self.epoch, "train_loss": self.train_loss,
                           "val_loss": self.val_loss, "lr": self.lr,
                           "wall_time_s": self.wall_time_s})


@dataclass
class TrainResult:
    bundle: ModelBundle
    history: list[EpochStats]
    best_epoch: int
    best_val_loss: float


def prepare_plane(record: PatientRecord | ImagePlane, side: int) -> ImagePlane:
    """Load (if needed), rescale to the model side and min-max normalize."""
    plane = load_image(record.image_path) if isinstance(record, PatientRecord) else record
    return normalize_intensity(rescale(plane, side))


def record_to_input(plane: ImagePlane, record: PatientRecord, bundle: ModelBundle):
    return to_model_input(
        plane,
        normalize_age(record.age_years, bundle.age_bounds),
        encode_gender(record.gender),
        channel_mean=bundle.channel_mean,
        channel_std=bundle.channel_std,
    )


def _epoch_eval_loss(bundle: ModelBundle, planes, records, angle_max: float,
                     batch_size: int) -> float:
    """Evaluation-mode MSE on normalized targets, no augmentation."""
    net = bundle.network
    net.eval()
    total = 0.0
    count = 0
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            inputs = [record_to_input(planes[r.patient_id], r, bundle) for r in chunk]
            images, ages, genders = batch_tensors(bundle, inputs)
            targets = torch.tensor(
                [normalize_angles(r.right_angle_deg, r.left_angle_deg, angle_max)
                 for r in chunk], dtype=images.dtype)
            out = net(images, ages, genders)
            total += float(((out - targets) ** 2).sum())
            count += targets.numel()
    return total / count


def train(train_records: Sequence[PatientRecord],
          val_records: Sequence[PatientRecord],
          bundle: ModelBundle,
          config: TrainRunConfig,
          out_dir: str | Path | None = None,
          log_every: int = 0) -> TrainResult:
    """Run the epoch loop and return the best-validation-loss checkpoint.

    angle_max is computed from the training fold only and stored in the
    returned bundle. With out_dir set, writes history.jsonl (one record
    per epoch) and bundle.zip (best checkpoint) there.
    """
    if not train_records or not val_records:
        raise ConfigError("train and validation sets must both be nonempty")
    train_ids = {r.patient_id for r in train_records}
    if train_ids & {r.patient_id for r in val_records}:
        raise ConfigError("train and validation sets overlap")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xA46]))

    angle_max = compute_angle_max(train_records)
    bundle.angle_max = angle_max
    net = bundle.network

    side = bundle.input_side
    planes: dict[str, ImagePlane] = {}
    for r in list(train_records) + list(val_records):
        planes[r.patient_id] = prepare_plane(r, side)
    # cache_images=False re-reads planes from disk each epoch (for corpora
    # too large to hold decoded); the phantom scale always fits.
    cached = config.cache_images

    optimizer = Nadam.from_model(net, lr=config.base_lr,
                                 beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    schedule = config.make_schedule()

    history: list[EpochStats] = []
    best_val = math.inf
    best_epoch = 0
    best_state = copy.deepcopy(net.state_dict())
    history_path = Path(out_dir) / "history.jsonl" if out_dir is not None else None
    if history_path is not None:
        history_path.parent.mkdir(parents=True, exist_ok=True)
        history_path.write_text("")

    train_list = list(train_records)
    val_list = list(val_records)
    for epoch in range(1, config.epochs + 1):
        t0 = time.monotonic()
        net.train()
        order = rng.permutation(len(train_list))
        total = 0.0
        count = 0
        for start in range(0, len(order), config.batch_size):
            chunk = [train_list[i] for i in order[start:start + config.batch_size]]
            inputs = []
            targets = []
            for r in chunk:
                plane = planes[r.patient_id] if cached else prepare_plane(r, side)
                sample = augment(
                    LabeledSample(plane, r.right_angle_deg, r.left_angle_deg),
                    config.augmentation, rng)
                inputs.append(to_model_input(
                    sample.plane,
                    normalize_age(r.age_years, bundle.age_bounds),
                    encode_gender(r.gender),
                    channel_mean=bundle.channel_mean,
                    channel_std=bundle.channel_std))
                targets.append(normalize_angles(sample.right_deg, sample.left_deg, angle_max))
            images, ages, genders = batch_tensors(bundle, inputs)
            target_t = torch.tensor(targets, dtype=images.dtype)

            optimizer.zero_grad(set_to_none=True)
            out = net(images, ages, genders)
            loss = mse_loss(out, target_t)
            loss.backward()
            try:
                optimizer.step()
            except NonFiniteGradientError as exc:
                raise NonFiniteGradientError(exc.param_name, f"epoch {epoch}") from exc
            total += float(loss) * target_t.numel()
            count += target_t.numel()

        train_loss = total / count
        val_loss = _epoch_eval_loss(bundle, planes, val_list, angle_max, config.batch_size)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise TrainingDivergedError(
                f"non-finite loss at epoch {epoch} (train {train_loss}, val {val_loss})",
                history=history)

        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = copy.deepcopy(net.state_dict())

        lr_next = schedule.step(val_loss)
        for group in optimizer.param_groups:
            group["lr"] = lr_next

        stats = EpochStats(epoch=epoch, train_loss=train_loss, val_loss=val_loss,
                           lr=schedule.lr, wall_time_s=time.monotonic() - t0)
        history.append(stats)
        if history_path is not None:
            with open(history_path, "a", encoding="utf-8") as fh:
                fh.write(stats.to_json() + "\n")
        if log_every and epoch % log_every == 0:
            print(f"epoch {epoch}/{config.epochs} train {train_loss:.5f} "
                  f"val {val_loss:.5f} lr {schedule.lr:.2e}", flush=True)

    net.load_state_dict(best_state)
    net.eval()
    result = TrainResult(bundle=bundle, history=history,
                         best_epoch=best_epoch, best_val_loss=best_val)
    if out_dir is not None:
        from .model import save_bundle
        save_bundle(bundle, Path(out_dir) / "bundle.zip")
    return result
