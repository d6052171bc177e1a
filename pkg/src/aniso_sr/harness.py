"""Slice-drop evaluation: hide odd slices, recover them, score, aggregate, test."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autodiff.serialize import atomic_write_bytes
from .autoencoder import Autoencoder, synthesize_between
from .baselines import KINDS, upsample_through_plane
from .metrics import PSNR_CAP_DB, VIF_VARIANT, InsufficientPairsError, psnr, ssim, vif
from .metrics.wilcoxon import wilcoxon_one_sided
from .volume_io import DegenerateInputError, Slice, Volume, VolumeShapeError

METHODS = ("ae",) + KINDS
METRICS = ("psnr_db", "ssim", "vif")
CSV_COLUMNS = ("volume_id", "slice_index", "method", "psnr_db", "ssim", "vif")
METRIC_VARIANTS = {
    "psnr_db": f"peak 1.0, capped at {PSNR_CAP_DB:g} dB in summaries",
    "ssim": "gaussian 11x11 sigma 1.5, valid windows, K1 0.01 K2 0.03",
    "vif": VIF_VARIANT,
}


@dataclass(frozen=True)
class EvalRecord:
    volume_id: str
    slice_index: int
    method: str
    psnr_db: float
    ssim: float
    vif: float

    def __post_init__(self):
        if self.slice_index % 2 != 1:
            raise ValueError(f"held-out slice index must be odd, got {self.slice_index}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")

    @property
    def key(self) -> tuple[str, int]:
        return (self.volume_id, self.slice_index)


@dataclass
class MetricStats:
    n: int
    mean: float
    median: float
    q1: float
    q3: float
    min: float
    max: float


@dataclass
class EvalSummary:
    stats: dict[str, dict[str, MetricStats]] = field(default_factory=dict)
    pvalues: dict[str, dict[str, float | None]] = field(default_factory=dict)
    notes: dict[str, dict[str, str]] = field(default_factory=dict)
    variants: dict[str, str] = field(default_factory=lambda: dict(METRIC_VARIANTS))

    def to_dict(self) -> dict:
        return {
            "variants": self.variants,
            "stats": {m: {k: asdict(s) for k, s in per.items()} for m, per in self.stats.items()},
            "wilcoxon_ae_greater": self.pvalues,
            "notes": self.notes,
        }


# ---------------------------------------------------------------------------
# protocol


def drop_alternate_slices(v: Volume) -> tuple[Volume, dict[int, Slice]]:
    """Keep even slices at doubled spacing; hold out odd slices with two neighbours."""
    n = v.shape[0]
    if n < 3:
        raise VolumeShapeError(f"slice-drop protocol needs at least 3 slices, got {n}")
    low = Volume(v.data[::2], (2.0 * v.spacing[0], v.spacing[1], v.spacing[2]),
                 f"{v.provenance}|drop-odd")
    held = {k: Slice(v.data[k], v.spacing[1:]) for k in range(1, n - 1, 2)}
    return low, held


def _scores(ref: np.ndarray, test: np.ndarray) -> tuple[float, float, float]:
    return psnr(ref, test), ssim(ref, test), vif(ref, test)


def evaluate_volume(model: Autoencoder | None, v: Volume, methods: Sequence[str] = METHODS,
                    volume_id: str = "0") -> list[EvalRecord]:
    """Score every method on every held-out slice of ``v`` (paired by index)."""
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; expected a subset of {METHODS}")
    low, held = drop_alternate_slices(v)
    records = []
    for method in methods:
        if method == "ae":
            if model is None:
                raise ValueError("method 'ae' needs a model")
            recovered = {k: synthesize_between(model, Slice(v.data[k - 1]), Slice(v.data[k + 1]),
                                               [0.5])[0].data for k in held}
        else:
            up = upsample_through_plane(low, 2, method)
            recovered = {k: up.data[k] for k in held}
        for k, truth in held.items():
            records.append(EvalRecord(volume_id, k, method, *_scores(truth.data, recovered[k])))
    return records


def evaluate_volumes(model: Autoencoder | None, volumes: Sequence[tuple[str, Volume]],
                     methods: Sequence[str] = METHODS, threads: int = 1) -> list[EvalRecord]:
    """Evaluate independent volumes, optionally on a thread pool; result is sorted."""
    def one(item):
        vid, v = item
        return evaluate_volume(model, v, methods, vid)

    if threads > 1 and len(volumes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(one, volumes))
    else:
        chunks = [one(item) for item in volumes]
    return sort_records(r for chunk in chunks for r in chunk)


def sort_records(records: Iterable[EvalRecord]) -> list[EvalRecord]:
    return sorted(records, key=lambda r: (r.volume_id, r.slice_index, r.method))


# ---------------------------------------------------------------------------
# aggregation


def metric_stats(values: Sequence[float]) -> MetricStats:
    x = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    return MetricStats(int(x.size), float(x.mean()), float(med), float(q1), float(q3),
                       float(x.min()), float(x.max()))


def _metric_value(r: EvalRecord, metric: str) -> float:
    value = getattr(r, metric)
    if metric == "psnr_db":
        return min(value, PSNR_CAP_DB)
    return value


def summarize(records: Sequence[EvalRecord]) -> EvalSummary:
    """Per-method boxplot statistics and AE-vs-baseline one-sided Wilcoxon tests.

    PSNR is capped at ``PSNR_CAP_DB`` so identical slices stay finite. A
    p-value is ``None`` when the test is undefined; ``notes`` says why.
    """
    summary = EvalSummary()
    by_method: dict[str, dict[tuple[str, int], EvalRecord]] = {}
    for r in records:
        per = by_method.setdefault(r.method, {})
        if r.key in per:
            raise ValueError(f"duplicate record for {r.method} at {r.key}")
        per[r.key] = r
    for method in sorted(by_method, key=lambda m: METHODS.index(m)):
        recs = list(by_method[method].values())
        summary.stats[method] = {
            metric: metric_stats([_metric_value(r, metric) for r in recs]) for metric in METRICS}

    ae = by_method.get("ae")
    if ae is None:
        return summary
    for base in KINDS:
        other = by_method.get(base)
        if other is None:
            continue
        keys = sorted(set(ae) & set(other))
        summary.pvalues[base] = {}
        summary.notes[base] = {}
        for metric in METRICS:
            a = [_metric_value(ae[k], metric) for k in keys]
            b = [_metric_value(other[k], metric) for k in keys]
            try:
                p = wilcoxon_one_sided(a, b, "greater")
            except DegenerateInputError as exc:
                p, why = None, f"degenerate: {exc}"
            except InsufficientPairsError as exc:
                p, why = None, f"insufficient pairs: {exc}"
            else:
                why = f"{len(keys)} pairs"
            summary.pvalues[base][metric] = p
            summary.notes[base][metric] = why
    return summary


# ---------------------------------------------------------------------------
# export and parsing


def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def records_to_csv(records: Sequence[EvalRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in sort_records(records):
        w.writerow([r.volume_id, r.slice_index, r.method, _fmt(r.psnr_db), _fmt(r.ssim), _fmt(r.vif)])
    return buf.getvalue()


def parse_records_csv(text: str) -> list[EvalRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise ValueError(f"report header must be {','.join(CSV_COLUMNS)}")
    out = []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(CSV_COLUMNS):
            raise ValueError(f"line {line}: expected {len(CSV_COLUMNS)} cells, got {len(row)}")
        out.append(EvalRecord(row[0], int(row[1]), row[2], float(row[3]), float(row[4]),
                              float(row[5])))
    return out


def summary_to_text(summary: EvalSummary) -> str:
    return json.dumps(summary.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"


def parse_structured(text: str) -> dict:
    """Parse a summary or metrics document written by this package."""
    return json.loads(text, parse_constant=lambda c: math.inf if c == "Infinity" else float(c))


def summary_path(report_path: str | os.PathLike) -> str:
    base, ext = os.path.splitext(os.fspath(report_path))
    return base + ".summary.json" if ext.lower() == ".csv" else os.fspath(report_path) + ".summary.json"


def export_report(summary: EvalSummary, records: Sequence[EvalRecord], path: str | os.PathLike,
                  format: str = "csv") -> None:
    """Write records (``csv``) or the summary (``structured_text``) atomically.

    For ``csv`` the summary is also written next to it, see :func:`summary_path`.
    """
    if format == "csv":
        atomic_write_bytes(path, records_to_csv(records).encode())
        atomic_write_bytes(summary_path(path), summary_to_text(summary).encode())
    elif format == "structured_text":
        atomic_write_bytes(path, summary_to_text(summary).encode())
    else:
        raise ValueError(f"format must be 'csv' or 'structured_text', got {format!r}")
