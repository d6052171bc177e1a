"""Classical 1D interpolators: linear, cubic B-spline and Lanczos-3.

All kernels operate along one array axis so a volume's voxel columns can be
resampled in a single vectorized pass. Sample ``k`` sits at coordinate
``k``; the scalar helpers accept ``0 <= t <= n - 1``.
"""
from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np

from .volume_io import Volume, VolumeShapeError

KINDS = ("linear", "bspline3", "lanczos3")
LANCZOS_A = 3
POLE = np.sqrt(3.0) - 2.0


class InterpolationDomainError(ValueError):
    """Coordinate outside the sampled interval."""


def _check_coordinate(n: int, t: float) -> None:
    if n < 1:
        raise VolumeShapeError("cannot interpolate an empty sequence")
    if not 0.0 <= t <= n - 1:
        raise InterpolationDomainError(f"t={t} outside [0, {n - 1}]")


def _mirror_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Reflect indices about 0 and n-1 without repeating the edge sample."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def _take(data: np.ndarray, idx: np.ndarray, axis: int) -> np.ndarray:
    return np.take(data, idx, axis=axis)


def _weighted(data: np.ndarray, idx: np.ndarray, weights: np.ndarray, axis: int) -> np.ndarray:
    """sum_j weights[m, j] * data[idx[m, j]] along ``axis``; returns axis of len(m)."""
    moved = np.moveaxis(np.asarray(data, dtype=np.float64), axis, 0)
    gathered = moved[idx]  # (m, taps, ...)
    w = weights.reshape(weights.shape + (1,) * (moved.ndim - 1))
    return np.moveaxis((gathered * w).sum(axis=1), 0, axis)


# ---------------------------------------------------------------------------
# linear


def linear_weights(n: int, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    coords = np.asarray(coords, dtype=np.float64)
    if n == 1:
        return np.zeros((coords.size, 2), int), np.tile([1.0, 0.0], (coords.size, 1))
    lo = np.clip(np.floor(coords).astype(int), 0, n - 2)
    f = coords - lo
    return np.stack([lo, lo + 1], axis=1), np.stack([1.0 - f, f], axis=1)


def interp_linear(samples: Sequence[float], t: float) -> float:
    s = np.asarray(samples, dtype=np.float64)
    _check_coordinate(s.size, t)
    if s.size == 1:
        return float(s[0])
    lo = min(int(np.floor(t)), s.size - 2)
    f = t - lo
    return float((1.0 - f) * s[lo] + f * s[lo + 1])


# ---------------------------------------------------------------------------
# cubic B-spline


def _bspline_weights(f: np.ndarray) -> np.ndarray:
    f2, f3 = f * f, f * f * f
    return np.stack([(1.0 - f) ** 3 / 6.0,
                     (3.0 * f3 - 6.0 * f2 + 4.0) / 6.0,
                     (-3.0 * f3 + 3.0 * f2 + 3.0 * f + 1.0) / 6.0,
                     f3 / 6.0], axis=1)


@lru_cache(maxsize=64)
def _not_a_knot_solver(n: int) -> np.ndarray:
    """Matrix mapping n samples to n + 4 coefficients c[-2] .. c[n+1].

    Rows: n interpolation conditions, two end conditions (third derivative
    continuous at knots 1 and n-2, which collapses to a single cubic,
    quadratic or line for n <= 4), and two extension rows that continue the
    end polynomial pieces so coordinates in [-1, n) can be evaluated.
    """
    m = n + 4
    a = np.zeros((m, m))
    col = lambda k: k + 2  # noqa: E731 - coefficient index -> column
    for k in range(n):
        a[k, col(k - 1):col(k + 1) + 1] = (1 / 6, 4 / 6, 1 / 6)
    d4 = np.array([1.0, -4.0, 6.0, -4.0, 1.0])
    d3 = np.array([-1.0, 3.0, -3.0, 1.0])
    d2 = np.array([1.0, -2.0, 1.0])
    r = n
    if n >= 4:
        a[r, col(-1):col(3) + 1] = d4
        a[r + 1, col(n - 4):col(n) + 1] = d4
    elif n == 3:
        a[r, col(-1):col(2) + 1] = d3
        a[r + 1, col(0):col(3) + 1] = d3
    elif n == 2:
        a[r, col(-1):col(1) + 1] = d2
        a[r + 1, col(0):col(2) + 1] = d2
    else:
        a[r, col(-1):col(0) + 1] = (1.0, -1.0)
        a[r + 1, col(0):col(1) + 1] = (-1.0, 1.0)
    # polynomial continuation beyond the ends
    if n >= 3:
        a[r + 2, col(-2):col(2) + 1] = d4
        a[r + 3, col(n - 3):col(n + 1) + 1] = d4
    else:
        a[r + 2, col(-2):col(0) + 1] = d2
        a[r + 3, col(n - 1):col(n + 1) + 1] = d2
    return np.linalg.inv(a)[:, :n]


def _mirror_prefilter(s: np.ndarray) -> np.ndarray:
    """Recursive cubic B-spline prefilter along axis 0, mirror boundary."""
    n = s.shape[0]
    c = np.array(s, dtype=np.float64) * 6.0
    if n == 1:
        return c / 6.0
    z = POLE
    # exact causal initialization for the mirror-symmetric extension
    zn = z
    z2n = z ** (n - 1)
    total = c[0] + z2n * c[n - 1]
    z2n = z2n * z2n / z
    for k in range(1, n - 1):
        total = total + (zn + z2n) * c[k]
        zn *= z
        z2n /= z
    c[0] = total / (1.0 - zn * zn)
    for k in range(1, n):
        c[k] = c[k] + z * c[k - 1]
    c[n - 1] = (z / (z * z - 1.0)) * (z * c[n - 2] + c[n - 1])
    for k in range(n - 2, -1, -1):
        c[k] = z * (c[k + 1] - c[k])
    return c


def bspline_coefficients(samples: np.ndarray, axis: int = 0,
                         boundary: str = "not-a-knot") -> np.ndarray:
    """B-spline coefficients for indices -2 .. n+1 along ``axis``.

    ``boundary="not-a-knot"`` (default) reproduces cubic polynomials exactly
    up to the ends; ``"mirror"`` uses the recursive prefilter with pole
    sqrt(3) - 2 on the mirror-symmetric extension.
    """
    s = np.moveaxis(np.asarray(samples, dtype=np.float64), axis, 0)
    n = s.shape[0]
    if n < 1:
        raise VolumeShapeError("cannot build a spline on an empty sequence")
    if boundary == "not-a-knot":
        solver = _not_a_knot_solver(n)
        c = np.tensordot(solver, s, axes=(1, 0))
    elif boundary == "mirror":
        inner = _mirror_prefilter(s)
        idx = _mirror_index(np.arange(-2, n + 2), n)
        c = inner[idx]
    else:
        raise ValueError(f"unknown boundary {boundary!r}")
    return np.moveaxis(c, 0, axis)


def bspline_evaluate(coeffs: np.ndarray, coords: np.ndarray, axis: int = 0) -> np.ndarray:
    """Evaluate coefficients from :func:`bspline_coefficients` at ``coords``.

    Valid for ``-1 <= t < n``; beyond ``[0, n-1]`` the end pieces are
    continued (extrapolation used only by in-plane resampling).
    """
    coords = np.asarray(coords, dtype=np.float64).ravel()
    n = np.shape(coeffs)[axis] - 4
    if coords.size and (coords.min() < -1.0 or coords.max() > n):
        raise InterpolationDomainError(f"coordinates outside [-1, {n}]")
    i = np.floor(coords).astype(int)
    i = np.minimum(i, n - 1)
    f = coords - i
    idx = (i[:, None] + np.arange(-1, 3)[None, :]) + 2
    return _weighted(coeffs, idx, _bspline_weights(f), axis)


def interp_bspline3(samples: Sequence[float], t: float, boundary: str = "not-a-knot") -> float:
    s = np.asarray(samples, dtype=np.float64)
    _check_coordinate(s.size, t)
    c = bspline_coefficients(s, boundary=boundary)
    return float(bspline_evaluate(c, [t])[0])


# ---------------------------------------------------------------------------
# Lanczos


def lanczos_kernel(x: np.ndarray, a: int = LANCZOS_A) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < a, np.sinc(x) * np.sinc(x / a), 0.0)


def lanczos_weights(n: int, coords: np.ndarray, a: int = LANCZOS_A) -> tuple[np.ndarray, np.ndarray]:
    coords = np.asarray(coords, dtype=np.float64).ravel()
    base = np.floor(coords).astype(int)
    taps = base[:, None] + np.arange(-a + 1, a + 1)[None, :]
    w = lanczos_kernel(coords[:, None] - taps, a)
    w = w / w.sum(axis=1, keepdims=True)
    return _mirror_index(taps, n), w


def interp_lanczos3(samples: Sequence[float], t: float) -> float:
    s = np.asarray(samples, dtype=np.float64)
    _check_coordinate(s.size, t)
    idx, w = lanczos_weights(s.size, np.array([t]))
    return float((s[idx[0]] * w[0]).sum())


# ---------------------------------------------------------------------------
# array resampling


def resample_axis(data: np.ndarray, coords: Sequence[float], kind: str, axis: int = 0) -> np.ndarray:
    """Interpolate ``data`` along ``axis`` at ``coords`` (float64 result)."""
    data = np.asarray(data)
    n = data.shape[axis]
    coords = np.asarray(coords, dtype=np.float64).ravel()
    if kind == "linear":
        idx, w = linear_weights(n, coords)
        return _weighted(data, idx, w, axis)
    if kind == "bspline3":
        return bspline_evaluate(bspline_coefficients(data, axis), coords, axis)
    if kind == "lanczos3":
        idx, w = lanczos_weights(n, coords)
        return _weighted(data, idx, w, axis)
    raise ValueError(f"unknown interpolator {kind!r}; expected one of {KINDS}")


def upsample_through_plane(v: Volume, factor: int, kind: str) -> Volume:
    """Insert ``factor - 1`` interpolated slices between acquired ones.

    Every voxel column is an independent 1D sequence sampled at ``k/factor``.
    Acquired slices are copied verbatim to indices ``k * factor``.
    """
    n = v.data.shape[0]
    if n < 2:
        raise VolumeShapeError(f"through-plane upsampling needs at least 2 slices, got {n}")
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    count = (n - 1) * factor + 1
    coords = np.arange(count) / factor
    out = resample_axis(v.data, coords, kind, axis=0).astype(np.float32)
    out[::factor] = v.data
    spacing = (v.spacing[0] / factor, v.spacing[1], v.spacing[2])
    return Volume(out, spacing, f"{v.provenance}|{kind} x{factor}")
