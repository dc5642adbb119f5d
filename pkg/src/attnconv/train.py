"""Toy-scale training loop, optimizer, schedules, and the ablation runner.

Runs are deterministic given the seed: the per-epoch permutation comes from a
seeded generator, batch composition is fixed, and all reductions happen in a
fixed order within one backend. Wall-clock time is logged for convenience but
excluded from log equality, CSV output and the determinism contract.

Augmentation/regularization keys from published recipes (mixup, cutmix,
random erasing, repeated augmentation, EMA) are accepted so configs round-trip,
but are inert here; setting them produces a warning.
"""

from __future__ import annotations

import csv
import io
import json
import time
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import backend as bk
from .data import Dataset
from .errors import ConfigurationError, ContractError, TrainingDiverged
from .models import Model, ModelConfig, build_model, preset_config
from .tensor import GradTape, Tensor, backward, cross_entropy, no_grad
from .activations import VARIANT_STRINGS

__all__ = ["TrainConfig", "EpochRecord", "TrainLog", "AdamW", "lr_for_epoch",
           "clip_gradients", "train", "ablate", "ablation_csv", "ABLATION_VARIANTS"]

#: Variant strings the ablation runner accepts.
ABLATION_VARIANTS = VARIANT_STRINGS + ("depthwise",)

_INERT_KEYS = ("mixup", "cutmix", "random_erasing", "repeated_augmentation", "ema")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_epochs: int = 3
    schedule: str = "cosine"  # cosine | constant
    label_smoothing: float = 0.1
    grad_clip: float | None = 5.0
    seed: int = 0
    # accepted for config-surface compatibility, not implemented:
    mixup: float | None = None
    cutmix: float | None = None
    random_erasing: float | None = None
    repeated_augmentation: bool = False
    ema: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch size must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"schedule must be cosine|constant, got "
                                     f"{self.schedule!r}")
        if self.grad_clip is not None and not (self.grad_clip > 0):
            raise ConfigurationError("grad_clip must be positive when set")
        inert = [k for k in _INERT_KEYS if getattr(self, k)]
        if inert:
            warnings.warn(f"config keys accepted but inert: {', '.join(inert)}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    lr: float
    wall_time: float

    def comparable(self) -> tuple:
        return (self.epoch, self.train_loss, self.train_acc, self.val_acc, self.lr)


@dataclass
class TrainLog:
    variant: str = ""
    records: list[EpochRecord] = field(default_factory=list)

    CSV_FIELDS = ("epoch", "train_loss", "train_acc", "val_acc", "lr")

    def comparable(self) -> list[tuple]:
        return [r.comparable() for r in self.records]

    def equals(self, other: "TrainLog") -> bool:
        """Bitwise equality of the training content (wall time excluded)."""
        return self.variant == other.variant and self.comparable() == other.comparable()

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(self.CSV_FIELDS)
        for r in self.records:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.train_acc),
                             repr(r.val_acc), repr(r.lr)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, variant: str = "") -> "TrainLog":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != cls.CSV_FIELDS:
            raise ContractError(f"unexpected CSV header {rows[:1]!r}")
        log = cls(variant=variant)
        for row in rows[1:]:
            log.records.append(EpochRecord(int(row[0]), float(row[1]), float(row[2]),
                                           float(row[3]), float(row[4]), 0.0))
        return log

    def to_json(self) -> str:
        return json.dumps({"variant": self.variant,
                           "records": [asdict(r) for r in self.records]}, indent=2)


class AdamW:
    """Decoupled-weight-decay adaptive moments over a parameter list."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros(p.size) for p in params]
        self._v = [np.zeros(p.size) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            flat = p.data.reshape(-1)
            bk.adamw_step(flat, p.grad.reshape(-1), m, v, lr, b1, b2,
                          self.eps, self.weight_decay, bc1, bc2)


def lr_for_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Linear warmup then cosine (or constant) decay; epoch is 0-based."""
    if cfg.warmup_epochs and epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / cfg.warmup_epochs
    if cfg.schedule == "constant":
        return cfg.lr
    span = max(1, cfg.epochs - cfg.warmup_epochs)
    progress = (epoch - cfg.warmup_epochs) / span
    return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * progress))


def clip_gradients(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so the global norm is at most `max_norm`."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


def _accuracy(model: Model, images: np.ndarray, labels: np.ndarray,
              batch_size: int) -> float:
    if images.shape[0] == 0:
        return float("nan")
    hits = 0
    with no_grad():
        for lo in range(0, images.shape[0], batch_size):
            batch = Tensor(images[lo:lo + batch_size])
            logits = model.forward(batch).data
            hits += int(np.sum(np.argmax(logits, axis=1) == labels[lo:lo + batch_size]))
    return hits / images.shape[0]


def train(model: Model, data: Dataset, cfg: TrainConfig,
          val_data: Dataset | None = None, variant: str = "") -> TrainLog:
    """Train `model` on `data`; returns the per-epoch log.

    Raises :class:`TrainingDiverged` (carrying the log of the finite epochs)
    if the loss stops being finite.
    """
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    log = TrainLog(variant=variant)
    m = len(data)
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        lr = float(lr_for_epoch(cfg, epoch))
        order = rng.permutation(m)
        total_loss = 0.0
        hits = 0
        for lo in range(0, m, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            images = Tensor(data.images[idx])
            labels = data.labels[idx]
            opt.zero_grad()
            with GradTape():
                logits = model.forward(images)
                loss = cross_entropy(logits, labels, cfg.label_smoothing)
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise TrainingDiverged(
                        f"loss became non-finite in epoch {epoch}; last finite "
                        f"epoch was {epoch - 1}", log=log)
                backward(loss)
            if cfg.grad_clip is not None:
                clip_gradients(params, cfg.grad_clip)
            opt.step(lr)
            total_loss += loss_val * len(idx)
            hits += int(np.sum(np.argmax(logits.data, axis=1) == labels))
        val_acc = (float("nan") if val_data is None else
                   _accuracy(model, val_data.images, val_data.labels, cfg.batch_size))
        log.records.append(EpochRecord(
            epoch=epoch,
            train_loss=total_loss / m,
            train_acc=hits / m,
            val_acc=val_acc,
            lr=lr,
            wall_time=time.perf_counter() - start,
        ))
    return log


def _model_config_for_variant(variant: str, base: ModelConfig) -> ModelConfig:
    if variant == "depthwise":
        return replace(base, attention_kind="depthwise", positional="rel",
                       activation="scaling")
    return replace(base, attention_kind="standard", activation=variant)


def ablate(variants: list[str], data: Dataset, cfg: TrainConfig,
           val_data: Dataset | None = None,
           base_config: ModelConfig | None = None,
           model_seed: int = 0) -> dict[str, TrainLog]:
    """Train one fresh model per variant with identical seed and data order."""
    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise ConfigurationError(
                f"unknown variant {v!r}; valid: {', '.join(ABLATION_VARIANTS)}")
    if base_config is None:
        base_config = preset_config("toy-vit")
    logs: dict[str, TrainLog] = {}
    for v in variants:
        model = build_model(_model_config_for_variant(v, base_config), seed=model_seed)
        logs[v] = train(model, data, cfg, val_data, variant=v)
    return logs


def ablation_csv(logs: dict[str, TrainLog]) -> str:
    """Comparative CSV: epoch, variant, loss, val_acc."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(("epoch", "variant", "loss", "val_acc"))
    for variant, log in logs.items():
        for r in log.records:
            writer.writerow([r.epoch, variant, repr(r.train_loss), repr(r.val_acc)])
    return buf.getvalue()
