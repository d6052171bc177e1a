"""Patch-based autoencoder training with augmentation and early stopping."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .autodiff import AdamState, Tensor, adam_step, backward, mse_loss, no_grad, zero_grad
from .autodiff.serialize import ModelWeights, save_weights
from .autoencoder import Autoencoder
from .volume_io import Slice, Volume, VolumeShapeError

log = logging.getLogger(__name__)


class TrainConfigError(ValueError):
    """Invalid training configuration or unusable training set."""


class NumericalAbort(RuntimeError):
    """Loss became non-finite; ``step`` is the offending step index."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite training loss {value} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    patch: int = 128
    batch_size: int = 16
    lr: float = 1e-5
    max_steps: int = 1000
    val_interval: int = 100
    early_stop_patience: int = 10
    seed: int = 0
    rot90: bool = True
    intensity_scale_range: tuple[float, float] = (0.9, 1.1)
    intensity_shift_range: tuple[float, float] = (-0.1, 0.1)
    log_path: str | None = None
    checkpoint_path: str | None = None

    def validate(self) -> None:
        if self.patch < 16 or self.patch % 16:
            raise TrainConfigError(f"patch must be a positive multiple of 16, got {self.patch}")
        if self.batch_size < 1:
            raise TrainConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise TrainConfigError(f"lr must be positive, got {self.lr}")
        if self.max_steps < 0 or self.val_interval < 1 or self.early_stop_patience < 1:
            raise TrainConfigError("max_steps >= 0, val_interval >= 1, early_stop_patience >= 1 required")
        for name in ("intensity_scale_range", "intensity_shift_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise TrainConfigError(f"{name} must be ordered, got ({lo}, {hi})")

    def with_overrides(self, overrides: dict[str, str]) -> "TrainConfig":
        """Return a copy with string-valued overrides coerced to field types."""
        known = {f.name: f for f in fields(self)}
        changes = {}
        for key, raw in overrides.items():
            if key not in known:
                raise TrainConfigError(f"unknown training option {key!r}")
            current = getattr(self, key)
            try:
                changes[key] = _coerce(raw, current, key)
            except ValueError as exc:
                raise TrainConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
        return replace(self, **changes)


def _coerce(raw, current, key: str):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if isinstance(current, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        parts = [p for p in text.strip("()[] ").split(",") if p.strip()]
        if len(parts) != 2:
            raise ValueError("expected two comma-separated numbers")
        return (float(parts[0]), float(parts[1]))
    if key.endswith("_path"):
        return text or None
    return text


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_steps: list[int] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    initial_val_loss: float | None = None
    best_step: int | None = None
    best_val_loss: float | None = None
    stopped_early: bool = False
    wall_seconds: float = 0.0


# ---------------------------------------------------------------------------
# sampling and augmentation


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; streams are platform independent."""
    return np.random.Generator(np.random.Philox(seed))


def _pad_to(img: np.ndarray, patch: int) -> np.ndarray:
    ph, pw = max(0, patch - img.shape[0]), max(0, patch - img.shape[1])
    if not ph and not pw:
        return img
    return np.pad(img, ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)), mode="reflect"
                  if min(img.shape) > 1 else "edge")


def sample_patch(volumes: Sequence[Volume], rng: np.random.Generator, patch: int = 128) -> Slice:
    """Draw a volume, a slice and a top-left offset, each uniformly."""
    if not volumes:
        raise TrainConfigError("training set is empty")
    v = volumes[int(rng.integers(len(volumes)))]
    k = int(rng.integers(v.shape[0]))
    img = v.data[k]
    while min(img.shape) < patch:
        img = _pad_to(img, min(patch, 2 * min(img.shape) - 1) if min(img.shape) > 1 else patch)
    r = int(rng.integers(img.shape[0] - patch + 1))
    c = int(rng.integers(img.shape[1] - patch + 1))
    return Slice(img[r:r + patch, c:c + patch], v.spacing[1:])


def apply_augmentation(s: Slice, k: int, scale: float, shift: float) -> Slice:
    """Rotate by ``k`` quarter turns, then ``clamp(scale * x + shift, 0, 1)``."""
    data = s.data
    if k % 4:
        if data.shape[0] != data.shape[1]:
            raise VolumeShapeError(f"rotation needs a square patch, got {data.shape}")
        data = np.rot90(data, k)
    out = np.clip(data.astype(np.float64) * scale + shift, 0.0, 1.0)
    return Slice(out, s.spacing)


def augment(s: Slice, rng: np.random.Generator, cfg: TrainConfig) -> Slice:
    k = int(rng.integers(4)) if cfg.rot90 else 0
    scale = float(rng.uniform(*cfg.intensity_scale_range))
    shift = float(rng.uniform(*cfg.intensity_shift_range))
    return apply_augmentation(s, k, scale, shift)


def draw_batch(volumes: Sequence[Volume], rng: np.random.Generator, cfg: TrainConfig) -> np.ndarray:
    batch = [augment(sample_patch(volumes, rng, cfg.patch), rng, cfg).data
             for _ in range(cfg.batch_size)]
    return np.stack(batch)[:, None].astype(np.float32)


# ---------------------------------------------------------------------------
# validation


def validation_slices(volumes: Sequence[Volume], multiple: int = 16,
                      max_size: int | None = None) -> np.ndarray:
    """All slices of ``volumes``, centre-cropped to a multiple of ``multiple``."""
    out = []
    for v in volumes:
        rows = v.shape[1] - v.shape[1] % multiple
        cols = v.shape[2] - v.shape[2] % multiple
        if max_size is not None:
            rows, cols = min(rows, max_size), min(cols, max_size)
        if rows < multiple or cols < multiple:
            raise VolumeShapeError(f"validation slices {v.shape[1:]} smaller than {multiple}")
        r0, c0 = (v.shape[1] - rows) // 2, (v.shape[2] - cols) // 2
        out.extend(v.data[:, r0:r0 + rows, c0:c0 + cols])
    return out


def reconstruction_mse(model: Autoencoder, slices: Sequence[np.ndarray], batch_size: int = 16) -> float:
    """Mean eval-mode MSE of the clamped reconstruction over ``slices``."""
    was_training = model.training
    model.eval()
    total = 0.0
    count = 0
    try:
        by_shape: dict[tuple[int, int], list[np.ndarray]] = {}
        for s in slices:
            by_shape.setdefault(s.shape, []).append(s)
        with no_grad():
            for shape in sorted(by_shape):
                group = by_shape[shape]
                for lo in range(0, len(group), batch_size):
                    x = np.stack(group[lo:lo + batch_size])[:, None].astype(np.float32)
                    pred = model.reconstruct(Tensor(x)).data.astype(np.float64)
                    total += float(np.sum((pred - x) ** 2))
                    count += x.size
    finally:
        if was_training:
            model.train()
    return total / count


# ---------------------------------------------------------------------------


class _CsvLog:
    def __init__(self, path: str | None):
        self.fh = None
        if path:
            self.fh = open(path, "w", newline="")
            self.writer = csv.writer(self.fh)
            self.writer.writerow(["step", "loss", "val_loss"])

    def row(self, step: int, loss: float, val: float | None) -> None:
        if self.fh:
            self.writer.writerow([step, repr(loss), "" if val is None else repr(val)])
            self.fh.flush()

    def close(self) -> None:
        if self.fh:
            self.fh.close()


def train(model: Autoencoder, volumes: Sequence[Volume], val_volumes: Sequence[Volume],
          cfg: TrainConfig) -> TrainReport:
    """Minimize clamped-reconstruction MSE with Adam; keep and restore the best-validation weights.

    With an empty validation set the final weights are kept and early
    stopping is disabled. Deterministic for a fixed ``cfg.seed``.
    """
    cfg.validate()
    if not volumes:
        raise TrainConfigError("training set is empty")
    report = TrainReport()
    start = time.perf_counter()
    if cfg.max_steps == 0:
        return report

    rng = make_rng(cfg.seed)
    params = model.parameters()
    state = AdamState(lr=cfg.lr)
    val = validation_slices(val_volumes, model.cfg.factor) if val_volumes else []
    best: ModelWeights | None = None
    since_best = 0
    if val:
        report.initial_val_loss = reconstruction_mse(model, val)
    csv_log = _CsvLog(cfg.log_path)
    model.train()
    try:
        for step in range(1, cfg.max_steps + 1):
            x = Tensor(draw_batch(volumes, rng, cfg))
            zero_grad(params)
            loss = mse_loss(model.reconstruct(x), x)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalAbort(step, value)
            backward(loss)
            adam_step(params, state)
            report.train_loss.append(value)

            val_value = None
            if val and step % cfg.val_interval == 0:
                val_value = reconstruction_mse(model, val)
                report.val_steps.append(step)
                report.val_loss.append(val_value)
                if report.best_val_loss is None or val_value < report.best_val_loss:
                    report.best_val_loss, report.best_step = val_value, step
                    best = model.state()
                    since_best = 0
                    if cfg.checkpoint_path:
                        save_weights(best, cfg.checkpoint_path)
                else:
                    since_best += 1
                log.info("step %d loss %.6g val %.6g", step, value, val_value)
            csv_log.row(step, value, val_value)
            if since_best >= cfg.early_stop_patience:
                report.stopped_early = True
                break
    finally:
        csv_log.close()
        model.eval()

    if best is not None:
        model.load_state(best)
    elif cfg.checkpoint_path:
        save_weights(model.state(), cfg.checkpoint_path)
    report.wall_seconds = time.perf_counter() - start
    return report
