"""Four-way tensor shape classification: Gaussian, Sharp, InvertedT, Line.

Two scale-free features drive the decision:

* ``kurt3s`` -- kurtosis after a 3-sigma filter;
* ``center_mass`` -- share of the filtered sample with ``|w| < alpha * sigma``,
  sigma being the unfiltered std.

A sparse signal buried under small noise piles mass into a narrow spike at
zero (high ``center_mass``); as the noise grows the spike widens into heavy
tails (high ``kurt3s``) and finally disappears into a Gaussian.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DegenerateSample, Inseparable
from .moments import Center, _finite, central_moments, sigma_filter

DEFAULT_ALPHA = 0.05


class ShapeClass(str, Enum):
    GAUSSIAN = "Gaussian"
    SHARP = "Sharp"
    INVERTED_T = "InvertedT"
    LINE = "Line"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class ShapeFeatures:
    kurt3s: float
    center_mass: float
    alpha: float = DEFAULT_ALPHA

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ClassifierThresholds:
    # Calibrated on the seed-42 synthetic sweep (see calibrate_thresholds).
    line_min_center_mass: float = 0.25
    invt_min_center_mass: float = 0.12
    sharp_min_kurt: float = 3.35
    gaussian_kurt_band: tuple[float, float] = (2.5, 3.35)

    def __post_init__(self):
        object.__setattr__(self, "gaussian_kurt_band", tuple(float(v) for v in self.gaussian_kurt_band))
        lo, hi = self.gaussian_kurt_band
        if not self.line_min_center_mass > self.invt_min_center_mass:
            raise ValueError("line_min_center_mass must exceed invt_min_center_mass")
        if not lo < self.sharp_min_kurt:
            raise ValueError("gaussian_kurt_band lower bound must be below sharp_min_kurt")
        if not lo <= hi:
            raise ValueError("gaussian_kurt_band must be (lo, hi) with lo <= hi")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gaussian_kurt_band"] = list(self.gaussian_kurt_band)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierThresholds":
        return cls(
            line_min_center_mass=float(d["line_min_center_mass"]),
            invt_min_center_mass=float(d["invt_min_center_mass"]),
            sharp_min_kurt=float(d["sharp_min_kurt"]),
            gaussian_kurt_band=tuple(d["gaussian_kurt_band"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ClassifierThresholds":
        return cls.from_dict(json.loads(Path(path).read_text()))


def features_from_filtered(kept: np.ndarray, std_full: float, alpha: float) -> ShapeFeatures:
    if kept.size == 0:
        raise DegenerateSample("3-sigma filter removed every value")
    _, m2, _, m4 = central_moments(kept)
    kurt = m4 / (m2 * m2) if m2 > 0 else math.nan
    center = float(np.count_nonzero(np.abs(kept) < alpha * std_full)) / kept.size
    return ShapeFeatures(float(kurt), center, alpha)


def extract_features(values, alpha: float = DEFAULT_ALPHA) -> ShapeFeatures:
    x, _ = _finite(values)
    if x.size < 2:
        raise DegenerateSample("need at least two finite values")
    kept, _, std = sigma_filter(x, 3.0, Center.SAMPLE_MEAN)
    if std == 0.0:
        raise DegenerateSample("sample has zero variance")
    return features_from_filtered(kept, std, alpha)


def classify(features: ShapeFeatures, thresholds: ClassifierThresholds | None = None) -> ShapeClass:
    t = thresholds or ClassifierThresholds()
    if features.center_mass >= t.line_min_center_mass:
        return ShapeClass.LINE
    if features.center_mass >= t.invt_min_center_mass:
        return ShapeClass.INVERTED_T
    if features.kurt3s >= t.sharp_min_kurt:
        return ShapeClass.SHARP
    lo, hi = t.gaussian_kurt_band
    if lo <= features.kurt3s <= hi:
        return ShapeClass.GAUSSIAN
    return ShapeClass.UNKNOWN


def _split(points, label, key, below):
    """Midpoint between ``label`` points and the ``below`` points on ``key``.

    Raises Inseparable if the two groups overlap.
    """
    inside = [p for p in points if p[2] is label]
    outside = [p for p in points if p[2] in below]
    if not inside or not outside:
        missing = label.value if not inside else "/".join(b.value for b in below)
        raise Inseparable(f"sweep has no {missing} points; cannot place the {label.value} boundary")
    lo_in = min(inside, key=lambda p: key(p[1]))
    hi_out = max(outside, key=lambda p: key(p[1]))
    if not key(lo_in[1]) > key(hi_out[1]):
        raise Inseparable(
            f"{label.value} point at noise {lo_in[0]} ({key(lo_in[1]):.6g}) does not clear "
            f"{hi_out[2].value} point at noise {hi_out[0]} ({key(hi_out[1]):.6g})"
        )
    return 0.5 * (key(lo_in[1]) + key(hi_out[1]))


def calibrate_thresholds(sweep) -> ClassifierThresholds:
    """Fit thresholds to labelled ``(noise_sigma, features, expected)`` triples.

    Each boundary sits midway between the closest pair of points from the
    neighbouring regimes. The lower edge of the Gaussian band keeps the
    default 2.5 unless a Gaussian point falls below it.
    """
    points = [(s, f, ShapeClass(c)) for s, f, c in sweep]
    for i, (_, fa, ca) in enumerate(points):
        for sb, fb, cb in points[i + 1 :]:
            if ca is not cb and (fa.kurt3s, fa.center_mass) == (fb.kurt3s, fb.center_mass):
                raise Inseparable(f"identical features labelled {ca.value} and {cb.value} (noise {sb})")
    cm = lambda f: f.center_mass  # noqa: E731
    ku = lambda f: f.kurt3s  # noqa: E731
    S, G, T, L = ShapeClass.SHARP, ShapeClass.GAUSSIAN, ShapeClass.INVERTED_T, ShapeClass.LINE
    line = _split(points, L, cm, (T, S, G))
    invt = _split(points, T, cm, (S, G))
    sharp = _split(points, S, ku, (G,))
    gauss_min = min(p[1].kurt3s for p in points if p[2] is G)
    band_lo = min(2.5, gauss_min - 0.5 * (sharp - gauss_min))
    thresholds = ClassifierThresholds(line, invt, sharp, (band_lo, sharp))
    for s, f, c in points:
        got = classify(f, thresholds)
        if got is not c:
            raise Inseparable(f"noise {s}: expected {c.value}, thresholds give {got.value}")
    return thresholds
