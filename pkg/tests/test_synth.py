import math

import numpy as np
import pytest

from weightlab.errors import InvalidSpec
from weightlab.moments import summarize
from weightlab.rng import make_rng
from weightlab.shapes import ShapeClass
from weightlab.synth import (
    SynthSpec,
    add_noise,
    gen_wstar,
    level_rng,
    noisy_levels,
    run_regime_sweep,
)

SMALL = SynthSpec(total_points=1_000_000, nonzero_points=200_000)


def keep_fraction(sigma, lo, hi):
    """P(lo <= |X| <= hi) for X ~ N(0, sigma^2)."""
    return math.erf(hi / (sigma * math.sqrt(2))) - math.erf(lo / (sigma * math.sqrt(2)))


@pytest.fixture(scope="module")
def wstar_small():
    return gen_wstar(SMALL)


def test_defaults_are_the_experiment():
    s = SynthSpec()
    assert (s.total_points, s.nonzero_points, s.seed) == (10_000_000, 2_000_000, 42)
    assert s.outlier_band == (0.6, 1.0) and s.gauss_sigma == 0.1
    assert (s.trunc_min_abs, s.trunc_max_abs) == (0.001, 0.5)
    assert s.noise_levels == (0.001, 0.005, 0.01, 0.03, 0.05, 0.1, 0.2, 0.3)
    assert s.outlier_count == 10_000


def test_nonzero_count_matches_cdf_oracle(wstar_small):
    n_out = SMALL.outlier_count
    p = keep_fraction(0.1, 0.001, 0.5)
    assert p == pytest.approx(0.992, abs=1e-3)
    n_gauss = SMALL.nonzero_points - n_out
    expected = n_out + n_gauss * p
    sd = math.sqrt(n_gauss * p * (1 - p))
    nnz = int(np.count_nonzero(wstar_small))
    assert nnz < SMALL.nonzero_points
    assert abs(nnz - expected) < 5 * sd


def test_outliers_and_truncation(wstar_small):
    mag = np.abs(wstar_small)
    big = mag > 0.5
    assert big.sum() == SMALL.outlier_count
    assert mag[big].min() >= 0.6 and mag[big].max() <= 1.0
    nz = mag[(mag > 0) & ~big]
    assert nz.min() >= 0.001 and nz.max() <= 0.5
    # symmetric signs by default
    signs = np.sign(wstar_small[big])
    assert abs(signs.mean()) < 5 / math.sqrt(big.sum())


def test_sparsity_and_symmetry(wstar_small):
    n = wstar_small.size
    assert np.mean(wstar_small == 0) >= 1 - SMALL.nonzero_points / n
    s = summarize(wstar_small, None)
    assert abs(s.mean) < 4 * s.std / math.sqrt(n)
    # heavy tails make skewness noisy: its standard error is sqrt(m6 / m2^3 / n)
    d = wstar_small - s.mean
    se = math.sqrt(np.mean(d**6) / s.std**6 / n)
    assert abs(s.skewness) < 5 * se


def test_no_outliers_when_fraction_zero():
    w = gen_wstar(SynthSpec(total_points=200_000, nonzero_points=40_000, outlier_frac=0.0))
    assert not np.any(np.abs(w) >= 0.6)


def test_positive_outlier_signs():
    w = gen_wstar(SynthSpec(total_points=200_000, nonzero_points=40_000, outlier_signs="positive"))
    assert np.all(w[np.abs(w) > 0.5] > 0)


def test_all_zero_when_no_support():
    w = gen_wstar(SynthSpec(total_points=1000, nonzero_points=0))
    assert w.shape == (1000,) and not w.any()


def test_deterministic():
    spec = SynthSpec(total_points=100_000, nonzero_points=20_000)
    assert np.array_equal(gen_wstar(spec), gen_wstar(spec))
    other = SynthSpec(total_points=100_000, nonzero_points=20_000, seed=7)
    assert not np.array_equal(gen_wstar(spec), gen_wstar(other))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"nonzero_points": 11, "total_points": 10},
        {"trunc_min_abs": 0.6},
        {"trunc_min_abs": 0.0},
        {"outlier_band": (1.0, 0.6)},
        {"noise_levels": (0.1, 0.0)},
        {"outlier_signs": "negative"},
    ],
)
def test_invalid_spec(kwargs):
    with pytest.raises(InvalidSpec):
        gen_wstar(SynthSpec(**{"total_points": 10, "nonzero_points": 2, **kwargs}))


def test_spec_json_round_trip(tmp_path):
    spec = SynthSpec(total_points=123, nonzero_points=7, noise_levels=(0.5,), seed=3)
    spec.save(tmp_path / "s.json")
    assert SynthSpec.load(tmp_path / "s.json") == spec
    with pytest.raises(InvalidSpec):
        SynthSpec.from_dict({"bogus": 1})


def test_add_noise_identity_and_law():
    x = np.arange(5.0)
    assert np.array_equal(add_noise(x, 0.0, make_rng(1)), x)
    noise = add_noise(np.zeros(1_000_000), 0.2, make_rng(1))
    s = summarize(noise, None)
    assert abs(s.std - 0.2) < 0.002
    assert abs(s.kurtosis - 3) < 0.05


def test_variance_additivity(wstar_small):
    signal = summarize(wstar_small, None).std
    noisy = add_noise(wstar_small, 0.3, level_rng(42, 7))
    expected = math.sqrt(signal**2 + 0.09)
    assert summarize(noisy, None).std == pytest.approx(expected, rel=0.01)


def test_level_streams_independent_of_order():
    spec = SynthSpec(total_points=50_000, nonzero_points=10_000, noise_levels=(0.01, 0.1))
    w = gen_wstar(spec)
    a = dict(noisy_levels(spec, w))
    b = add_noise(w, 0.1, level_rng(spec.seed, 1))
    assert np.array_equal(a[0.1], b)
    assert not np.array_equal(a[0.01] - w, (a[0.1] - w) / 10)


def test_sweep_deterministic_and_monotone():
    spec = SynthSpec(total_points=400_000, nonzero_points=80_000)
    r1 = run_regime_sweep(spec)
    r2 = run_regime_sweep(spec)
    assert [x.to_dict(True) for x in r1] == [x.to_dict(True) for x in r2]
    assert len(r1) == len(spec.noise_levels)
    raw = [x.raw_kurtosis for x in r1]
    assert all(a >= b for a, b in zip(raw, raw[1:]))
    filtered = [x.stats.kurtosis for x in r1]
    assert all(a >= b for a, b in zip(filtered, filtered[1:]))


def test_single_level_gaussian():
    spec = SynthSpec(total_points=1_000_000, nonzero_points=200_000, noise_levels=(0.1,))
    (report,) = run_regime_sweep(spec)
    assert report.shape is ShapeClass.GAUSSIAN
