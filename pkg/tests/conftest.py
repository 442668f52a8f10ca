from fractions import Fraction

import numpy as np
import pytest

from weightlab.tensor_io import model_from_arrays


def naive_moments(values):
    """Exact rational two-pass central moments (mean, m2, m3, m4)."""
    xs = [Fraction(float(v)) for v in np.ravel(values)]
    n = len(xs)
    mean = sum(xs) / n
    d = [x - mean for x in xs]
    m2 = sum(e * e for e in d) / n
    m3 = sum(e * e * e for e in d) / n
    m4 = sum(e**4 for e in d) / n
    return float(mean), float(m2), float(m3), float(m4)


def reference_outlier_merge(base, tuned, t, center_mean=False):
    """Outlier-aware merge written element by element, in plain Python floats.

    ``base``: list of flat float lists per group; ``tuned``: per model, per
    group. Steps: deltas, per-model std, min std, per
    element scale-or-keep, sum in model order, add to base.
    """
    n = len(tuned)
    merged = []
    for k, w in enumerate(base):
        deltas = [[tuned[i][k][j] - w[j] for j in range(len(w))] for i in range(n)]
        sigmas = []
        for d in deltas:
            mean, m2, _, _ = naive_moments(d)
            sigmas.append(m2**0.5)
        sigma = min(sigmas)
        processed = []
        for d in deltas:
            c = naive_moments(d)[0] if center_mean else 0.0
            row = []
            for x in d:
                if -t * sigma <= x - c <= t * sigma:
                    row.append(x / n)
                else:
                    row.append(x)
            processed.append(row)
        out = []
        for j in range(len(w)):
            acc = 0.0
            for i in range(n):
                acc = acc + processed[i][j]
            out.append(w[j] + acc)
        merged.append(out)
    return merged


@pytest.fixture
def make_model():
    def _make(arrays, dtype="F64", source=None):
        return model_from_arrays(arrays, dtype=dtype, source=source)

    return _make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[str, str] = {}


def record_acceptance(tag: str, ok: bool, detail: str) -> None:
    line = f"{tag} {'PASS' if ok else 'FAIL'}  {detail}"
    _ACCEPTANCE[tag] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance")
        for tag in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[tag])
