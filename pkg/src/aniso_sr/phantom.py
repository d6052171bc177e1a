"""Synthetic volumes: a Gaussian blob that drifts and swells from slice to slice."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume_io import Volume


@dataclass(frozen=True)
class BlobParams:
    center: tuple[float, float]
    velocity: tuple[float, float]
    sigma: float
    growth: float
    amplitude: float


def draw_blob(rng: np.random.Generator, slices: int, size: int) -> BlobParams:
    sigma = float(rng.uniform(0.06, 0.12) * size)
    growth = float(rng.uniform(1.2, 1.8))
    travel = float(rng.uniform(0.12, 0.3) * size)
    angle = float(rng.uniform(0.0, 2.0 * np.pi))
    steps = max(slices - 1, 1)
    velocity = (travel * np.sin(angle) / steps, travel * np.cos(angle) / steps)
    mid = (size - 1) / 2.0
    center = (mid - velocity[0] * steps / 2.0 + float(rng.uniform(-0.08, 0.08) * size),
              mid - velocity[1] * steps / 2.0 + float(rng.uniform(-0.08, 0.08) * size))
    return BlobParams(center, velocity, sigma, growth, float(rng.uniform(0.6, 1.0)))


def render_blob(p: BlobParams, slices: int, size: int) -> np.ndarray:
    """Render in float64; slice ``k`` is centred at ``center + k * velocity``."""
    rows = np.arange(size, dtype=np.float64)[:, None]
    cols = np.arange(size, dtype=np.float64)[None, :]
    steps = max(slices - 1, 1)
    out = np.empty((slices, size, size))
    for k in range(slices):
        cr = p.center[0] + k * p.velocity[0]
        cc = p.center[1] + k * p.velocity[1]
        sd = p.sigma * p.growth ** (k / steps)
        out[k] = p.amplitude * np.exp(-((rows - cr) ** 2 + (cols - cc) ** 2) / (2.0 * sd * sd))
    return out


def blob_volume(rng: np.random.Generator, slices: int = 9, size: int = 64,
                spacing: tuple[float, float, float] = (5.0, 1.4, 1.4), tag: str = "") -> Volume:
    p = draw_blob(rng, slices, size)
    return Volume(render_blob(p, slices, size), spacing, f"phantom:{tag}")


def phantom_set(count: int = 200, seed: int = 0, slices: int = 9, size: int = 64) -> list[Volume]:
    rng = np.random.Generator(np.random.Philox(seed))
    return [blob_volume(rng, slices, size, tag=str(i)) for i in range(count)]


def split(volumes: list[Volume], train: int = 160, val: int = 20,
          test: int = 20) -> tuple[list[Volume], list[Volume], list[Volume]]:
    if train + val + test > len(volumes):
        raise ValueError(f"split {train}/{val}/{test} needs {train + val + test} volumes, "
                         f"got {len(volumes)}")
    return (volumes[:train], volumes[train:train + val],
            volumes[train + val:train + val + test])
