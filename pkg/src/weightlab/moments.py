"""Distribution statistics for weight tensors.

All moments are population moments (divide by N) computed in two passes
over float64 data. Every sum is compensated and uses a fixed reduction
tree (see ``stable_sum``). The result does not depend on scheduling and
stays accurate at 10^7+ elements.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from enum import Enum

import numpy as np

from .errors import EmptyAfterFilter, EmptyInput

_LANES = 8192


class Center(str, Enum):
    ZERO = "zero"
    SAMPLE_MEAN = "sample_mean"


@dataclass(frozen=True)
class FilterSpec:
    sigma_k: float | None = 3.0
    magnitude_min: float | None = None
    center: Center = Center.SAMPLE_MEAN

    def __post_init__(self):
        if self.sigma_k is not None and not self.sigma_k > 0:
            raise ValueError("sigma_k must be positive")
        if self.magnitude_min is not None and not self.magnitude_min >= 0:
            raise ValueError("magnitude_min must be non-negative")
        object.__setattr__(self, "center", Center(self.center))


@dataclass(frozen=True)
class StatsSummary:
    """Per-tensor statistics.

    ``skewness`` and ``kurtosis`` are ``None`` when undefined (fewer than two
    elements, or zero variance). Kurtosis is the plain fourth standardized
    moment, so a Gaussian scores 3.
    """

    count: int
    mean: float
    std: float
    skewness: float | None
    kurtosis: float | None
    retain_ratio: float
    small_frac: float
    nonfinite_count: int

    @property
    def moments_defined(self) -> bool:
        return self.kurtosis is not None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def csv_header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(
            ["" if v is None else v for v in asdict(self).values()]
        )
        return buf.getvalue()


@dataclass(frozen=True)
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    underflow: int
    overflow: int

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["bin_center", "count"])
        for c, n in zip(self.bin_centers, self.counts):
            writer.writerow([repr(float(c)), int(n)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "bin_edges": [float(e) for e in self.bin_edges],
            "counts": [int(c) for c in self.counts],
            "underflow": int(self.underflow),
            "overflow": int(self.overflow),
        }


def stable_sum(x: np.ndarray) -> float:
    """Compensated sum with a fixed reduction tree.

    The array is laid out as rows of ``_LANES`` columns; each column runs a
    Neumaier (Kahan-Babuska) accumulation down the rows, then the column
    sums and their compensations are combined exactly with ``math.fsum``.
    """
    x = np.ascontiguousarray(x, dtype=np.float64).ravel()
    n = x.size
    if n < 4 * _LANES:
        return math.fsum(x.tolist())
    rows = n // _LANES
    body = x[: rows * _LANES].reshape(rows, _LANES)
    s = body[0].copy()
    comp = np.zeros(_LANES)
    for row in body[1:]:
        t = s + row
        comp += np.where(np.abs(s) >= np.abs(row), (s - t) + row, (row - t) + s)
        s = t
    return math.fsum(s.tolist() + comp.tolist() + x[rows * _LANES :].tolist())


def central_moments(x: np.ndarray) -> tuple[float, float, float, float]:
    """Return (mean, m2, m3, m4) with a refined mean."""
    n = x.size
    mean = stable_sum(x) / n
    mean += stable_sum(x - mean) / n
    d = x - mean
    d2 = d * d
    m2 = stable_sum(d2) / n
    m3 = stable_sum(d2 * d) / n
    m4 = stable_sum(d2 * d2) / n
    return mean, m2, m3, m4


def _finite(values) -> tuple[np.ndarray, int]:
    x = np.asarray(values, dtype=np.float64).ravel()
    ok = np.isfinite(x)
    if ok.all():
        return x, 0
    return x[ok], int(x.size - ok.sum())


def sigma_filter(x: np.ndarray, k: float, center: Center = Center.SAMPLE_MEAN):
    """Keep values in the closed band ``[c - k*sigma, c + k*sigma]``.

    ``sigma`` is the population std of ``x``. Returns (kept, mean, std) where
    mean and std describe the unfiltered sample.
    """
    mean, m2, _, _ = central_moments(x)
    std = math.sqrt(m2)
    c = mean if Center(center) is Center.SAMPLE_MEAN else 0.0
    kept = x[np.abs(x - c) <= k * std]
    return kept, mean, std


def _summary(x: np.ndarray, retain: float, small: float, nonfinite: int) -> StatsSummary:
    mean, m2, m3, m4 = central_moments(x)
    if x.size < 2 or m2 * m2 == 0.0:
        skew = kurt = None
    else:
        skew = m3 / m2**1.5
        kurt = m4 / (m2 * m2)
    return StatsSummary(
        count=int(x.size),
        mean=float(mean),
        std=math.sqrt(m2),
        skewness=skew,
        kurtosis=kurt,
        retain_ratio=float(retain),
        small_frac=float(small),
        nonfinite_count=nonfinite,
    )


def summarize(values, filter: FilterSpec | None = None) -> StatsSummary:
    """Moments of ``values`` after the optional sigma and magnitude filters.

    With ``filter.sigma_k`` set, the band is built from the full finite
    sample and every reported moment is recomputed on what survives.
    ``small_frac`` is the share of the post-sigma sample removed by
    ``magnitude_min``.
    """
    x, nonfinite = _finite(values)
    if x.size == 0:
        raise EmptyAfterFilter("no finite values to summarize")
    retain = 1.0
    small = 0.0
    if filter is not None and filter.sigma_k is not None:
        n0 = x.size
        x, _, _ = sigma_filter(x, filter.sigma_k, filter.center)
        retain = x.size / n0
    if filter is not None and filter.magnitude_min is not None:
        if x.size == 0:
            raise EmptyAfterFilter("sigma filter removed every value")
        tiny = np.abs(x) < filter.magnitude_min
        small = float(tiny.mean())
        x = x[~tiny]
    if x.size == 0:
        raise EmptyAfterFilter("filters removed every value")
    return _summary(x, retain, small, nonfinite)


def pooled_summary(summaries: list[StatsSummary]) -> StatsSummary:
    """Element-weighted average of per-tensor summaries.

    Undefined skewness/kurtosis entries are left out of their averages.
    """
    if not summaries:
        raise EmptyInput("no summaries to pool")
    w = np.array([s.count for s in summaries], dtype=np.float64)
    total = w.sum()

    def wavg(attr):
        pairs = [(s.count, getattr(s, attr)) for s in summaries if getattr(s, attr) is not None]
        if not pairs:
            return None
        cw = sum(c for c, _ in pairs)
        return math.fsum(c * v for c, v in pairs) / cw

    # retain_ratio weights by the pre-filter size
    pre = np.array([s.count / s.retain_ratio if s.retain_ratio > 0 else s.count for s in summaries])
    return StatsSummary(
        count=int(total),
        mean=wavg("mean"),
        std=wavg("std"),
        skewness=wavg("skewness"),
        kurtosis=wavg("kurtosis"),
        retain_ratio=float(total / pre.sum()),
        small_frac=wavg("small_frac"),
        nonfinite_count=sum(s.nonfinite_count for s in summaries),
    )


def histogram(values, bins: int, range: tuple[float, float] | None = None) -> Histogram:
    """Uniform-width histogram of the finite values.

    ``x`` lands in bin ``floor((x - lo) / width)``; ``x == hi`` goes to the
    last bin. Values outside ``[lo, hi]`` count as under/overflow. The
    default range is mean +/- 4 std.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    x, _ = _finite(values)
    if x.size == 0:
        raise EmptyInput("histogram of an empty sample")
    if range is None:
        mean, m2, _, _ = central_moments(x)
        half = 4.0 * math.sqrt(m2) or 0.5
        lo, hi = mean - half, mean + half
    else:
        lo, hi = float(range[0]), float(range[1])
        if not lo < hi:
            raise ValueError("histogram range needs lo < hi")
    width = (hi - lo) / bins
    under = int(np.count_nonzero(x < lo))
    over = int(np.count_nonzero(x > hi))
    inside = x[(x >= lo) & (x <= hi)]
    idx = np.floor((inside - lo) / width).astype(np.int64)
    np.clip(idx, 0, bins - 1, out=idx)
    counts = np.bincount(idx, minlength=bins)
    edges = lo + width * np.arange(bins + 1)
    edges[-1] = hi
    return Histogram(edges, counts, under, over)


def outlier_split(values, threshold: float, center: Center = Center.ZERO):
    """Split finite values into (in_range, outliers) around a closed band."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    x, _ = _finite(values)
    if Center(center) is Center.SAMPLE_MEAN and x.size:
        c = central_moments(x)[0]
    else:
        c = 0.0
    inside = np.abs(x - c) <= threshold
    return x[inside], x[~inside]


def ascii_histogram(hist: Histogram, width: int = 60, max_rows: int = 40) -> str:
    """Fixed-width text rendering, coarsened to at most ``max_rows`` rows."""
    counts = hist.counts
    edges = hist.bin_edges
    if counts.size > max_rows:
        group = math.ceil(counts.size / max_rows)
        pad = (-counts.size) % group
        counts = np.concatenate([counts, np.zeros(pad, dtype=counts.dtype)]).reshape(-1, group).sum(axis=1)
        edges = np.append(edges[::group][: counts.size], edges[-1])
    peak = counts.max() or 1
    lines = []
    for lo, n in zip(edges[:-1], counts):
        bar = "#" * int(round(width * n / peak))
        lines.append(f"{lo:+.4e} | {bar} {int(n)}")
    return "\n".join(lines)
