"""Synthetic sparse W* plus Gaussian noise, swept over noise levels.

W* is mostly exact zeros. A small fraction of its support holds large
outliers; the rest is a truncated N(0, 0.1^2). Adding noise at increasing
levels reproduces the Line -> InvertedT -> Sharp -> Gaussian progression
seen in real checkpoints.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import InvalidSpec
from .moments import Histogram, StatsSummary, _summary, central_moments, histogram
from .rng import STREAM_NOISE, STREAM_WSTAR, make_rng
from .shapes import (
    DEFAULT_ALPHA,
    ClassifierThresholds,
    ShapeClass,
    ShapeFeatures,
    classify,
    features_from_filtered,
)

DEFAULT_NOISE_LEVELS = (0.001, 0.005, 0.01, 0.03, 0.05, 0.1, 0.2, 0.3)

# regime labels for the default sweep
EXPECTED_SHAPES = {
    0.001: ShapeClass.LINE,
    0.005: ShapeClass.LINE,
    0.01: ShapeClass.INVERTED_T,
    0.03: ShapeClass.SHARP,
    0.05: ShapeClass.SHARP,
    0.1: ShapeClass.GAUSSIAN,
    0.2: ShapeClass.GAUSSIAN,
    0.3: ShapeClass.GAUSSIAN,
}


@dataclass(frozen=True)
class SynthSpec:
    total_points: int = 10_000_000
    nonzero_points: int = 2_000_000
    outlier_frac: float = 0.005
    outlier_band: tuple[float, float] = (0.6, 1.0)
    gauss_sigma: float = 0.1
    trunc_min_abs: float = 0.001
    trunc_max_abs: float = 0.5
    noise_levels: tuple[float, ...] = field(default=DEFAULT_NOISE_LEVELS)
    seed: int = 42
    outlier_signs: str = "symmetric"

    def __post_init__(self):
        object.__setattr__(self, "outlier_band", tuple(float(v) for v in self.outlier_band))
        object.__setattr__(self, "noise_levels", tuple(float(v) for v in self.noise_levels))

    def validate(self) -> None:
        problems = []
        if not 0 <= self.nonzero_points <= self.total_points:
            problems.append("need 0 <= nonzero_points <= total_points")
        if not 0 < self.trunc_min_abs < self.trunc_max_abs:
            problems.append("need 0 < trunc_min_abs < trunc_max_abs")
        lo, hi = self.outlier_band
        if not lo < hi:
            problems.append("outlier_band must satisfy lo < hi")
        if not 0 <= self.outlier_frac <= 1:
            problems.append("outlier_frac must lie in [0, 1]")
        if not self.gauss_sigma > 0:
            problems.append("gauss_sigma must be positive")
        if not all(s > 0 for s in self.noise_levels):
            problems.append("noise levels must be positive")
        if self.seed < 0:
            problems.append("seed must be non-negative")
        if self.outlier_signs not in ("symmetric", "positive"):
            problems.append("outlier_signs must be 'symmetric' or 'positive'")
        if problems:
            raise InvalidSpec("; ".join(problems))

    @property
    def outlier_count(self) -> int:
        # guard against 0.005 * 2e6 landing a hair above an integer
        return math.ceil(round(self.outlier_frac * self.nonzero_points, 9))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["outlier_band"] = list(self.outlier_band)
        d["noise_levels"] = list(self.noise_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise InvalidSpec(f"unknown SynthSpec fields: {sorted(extra)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RegimeReport:
    noise_sigma: float
    stats: StatsSummary
    features: ShapeFeatures
    shape: ShapeClass
    histogram: Histogram
    raw_kurtosis: float

    def to_dict(self, with_histogram: bool = False) -> dict:
        d = {
            "noise_sigma": self.noise_sigma,
            "shape": self.shape.value,
            "raw_kurtosis": self.raw_kurtosis,
            "stats": self.stats.to_dict(),
            "features": self.features.to_dict(),
        }
        if with_histogram:
            d["histogram"] = self.histogram.to_dict()
        return d


def gen_wstar(spec: SynthSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    spec.validate()
    if rng is None:
        rng = make_rng(spec.seed, STREAM_WSTAR)
    w = np.zeros(spec.total_points, dtype=np.float64)
    if spec.nonzero_points == 0:
        return w
    support = rng.choice(spec.total_points, size=spec.nonzero_points, replace=False)
    n_out = spec.outlier_count
    out_pos, gauss_pos = support[:n_out], support[n_out:]

    lo, hi = spec.outlier_band
    out_vals = rng.uniform(lo, hi, size=n_out)
    if spec.outlier_signs == "symmetric":
        out_vals *= rng.choice(np.array([-1.0, 1.0]), size=n_out)
    w[out_pos] = out_vals

    g = rng.standard_normal(gauss_pos.size) * spec.gauss_sigma
    mag = np.abs(g)
    g[(mag < spec.trunc_min_abs) | (mag > spec.trunc_max_abs)] = 0.0
    w[gauss_pos] = g
    return w


def add_noise(values, noise_sigma: float, rng: np.random.Generator) -> np.ndarray:
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    values = np.asarray(values, dtype=np.float64)
    if noise_sigma == 0:
        return values.copy()
    return values + noise_sigma * rng.standard_normal(values.shape)


def level_rng(seed: int, level_index: int) -> np.random.Generator:
    """Noise stream for one sweep level: keyed on ``seed XOR level_index``."""
    return make_rng(seed ^ level_index, STREAM_NOISE)


def noisy_levels(spec: SynthSpec, wstar: np.ndarray | None = None) -> Iterator[tuple[float, np.ndarray]]:
    if wstar is None:
        wstar = gen_wstar(spec)
    for i, sigma in enumerate(spec.noise_levels):
        yield sigma, add_noise(wstar, sigma, level_rng(spec.seed, i))


def regime_report(
    x: np.ndarray,
    noise_sigma: float,
    thresholds: ClassifierThresholds | None = None,
    alpha: float = DEFAULT_ALPHA,
    bins: int = 200,
) -> RegimeReport:
    mean, m2, _, m4 = central_moments(x)
    std = math.sqrt(m2)
    kept = x[np.abs(x - mean) <= 3.0 * std]
    stats = _summary(kept, kept.size / x.size, 0.0, 0)
    features = features_from_filtered(kept, std, alpha)
    hist = histogram(x, bins, (mean - 4 * std, mean + 4 * std))
    return RegimeReport(
        noise_sigma=noise_sigma,
        stats=stats,
        features=features,
        shape=classify(features, thresholds),
        histogram=hist,
        raw_kurtosis=m4 / (m2 * m2),
    )


def run_regime_sweep(
    spec: SynthSpec | None = None,
    thresholds: ClassifierThresholds | None = None,
    alpha: float = DEFAULT_ALPHA,
    bins: int = 200,
) -> list[RegimeReport]:
    spec = spec or SynthSpec()
    spec.validate()
    return [
        regime_report(x, sigma, thresholds, alpha, bins) for sigma, x in noisy_levels(spec)
    ]


def sweep_for_calibration(reports: list[RegimeReport], expected=EXPECTED_SHAPES):
    """Pair each report with its expected label for ``calibrate_thresholds``."""
    return [(r.noise_sigma, r.features, expected[r.noise_sigma]) for r in reports]
