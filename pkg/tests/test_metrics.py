"""Metric oracles: RMSE formula, ensemble CRPS vs analytic Gaussian CRPS,
coverage edge cases."""
import numpy as np
import pytest
from scipy import stats

from icecal.metrics import coverage95, crps_ensemble, empirical_interval95, rmse


# ---------------------------------------------------------------------------
# rmse
# ---------------------------------------------------------------------------

def test_rmse_exact_match_is_zero():
    v = np.linspace(-3.0, 7.0, 11)
    assert rmse(v, v) == 0.0


def test_rmse_constant_offset_one():
    v = np.random.default_rng(0).normal(size=50)
    assert rmse(v + 1.0, v) == pytest.approx(1.0, abs=1e-14)


def test_rmse_matches_formula_oracle():
    rng = np.random.default_rng(42)
    for _ in range(20):
        n = rng.integers(2, 300)
        a = rng.normal(size=n) * rng.uniform(0.1, 100)
        b = rng.normal(size=n) * rng.uniform(0.1, 100)
        direct = np.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)) / n)
        assert abs(rmse(a, b) - direct) <= 1e-12 * max(direct, 1.0)


def test_rmse_length_mismatch_raises():
    with pytest.raises(ValueError, match="length mismatch"):
        rmse(np.zeros(3), np.zeros(4))


# ---------------------------------------------------------------------------
# crps_ensemble
# ---------------------------------------------------------------------------

def _crps_brute(samples, truth):
    n = samples.shape[0]
    out = []
    for j in range(samples.shape[1]):
        x = samples[:, j]
        t1 = np.mean(np.abs(x - truth[j]))
        t2 = np.mean(np.abs(x[:, None] - x[None, :]))
        out.append(t1 - 0.5 * t2)
    return np.array(out)


def test_crps_degenerate_ensemble_at_truth_is_zero():
    truth = np.array([1.0, -2.0, 5.0])
    samples = np.tile(truth, (6, 1))
    assert crps_ensemble(samples, truth) == 0.0


def test_crps_point_ensemble_reduces_to_absolute_error():
    truth = np.array([2.0])
    samples = np.full((8, 1), 5.0)
    assert crps_ensemble(samples, truth) == pytest.approx(3.0, abs=1e-14)


def test_crps_matches_pairwise_brute_force():
    rng = np.random.default_rng(7)
    samples = rng.normal(size=(37, 9)) * 3.0
    truth = rng.normal(size=9)
    per_node = _crps_brute(samples, truth)
    assert crps_ensemble(samples, truth) == pytest.approx(per_node.mean(), rel=1e-12)
    assert crps_ensemble(samples, truth, mode="sum-per-node") == pytest.approx(
        per_node.sum(), rel=1e-12)


def test_crps_gaussian_analytic_oracle():
    # closed form: CRPS(N(mu, s^2), y) = s*(z*(2*Phi(z)-1) + 2*phi(z) - 1/sqrt(pi))
    rng = np.random.default_rng(123)
    mu, sd = 1.5, 2.0
    truth = np.linspace(mu - 2 * sd, mu + 2 * sd, 16)
    z = (truth - mu) / sd
    exact = sd * (z * (2 * stats.norm.cdf(z) - 1)
                  + 2 * stats.norm.pdf(z) - 1 / np.sqrt(np.pi))
    samples = rng.normal(mu, sd, size=(10_000, truth.size))
    est = crps_ensemble(samples, truth)
    assert est == pytest.approx(exact.mean(), rel=0.02)
    est_sum = crps_ensemble(samples, truth, mode="sum-per-node")
    assert est_sum == pytest.approx(exact.sum(), rel=0.02)


def test_crps_too_few_draws_raises():
    with pytest.raises(ValueError, match="at least 2 draws"):
        crps_ensemble(np.ones((1, 4)), np.zeros(4))


def test_crps_rejects_unknown_mode():
    with pytest.raises(ValueError, match="mode"):
        crps_ensemble(np.ones((3, 2)), np.zeros(2), mode="median")


def test_crps_truth_length_checked():
    with pytest.raises(ValueError, match="does not match"):
        crps_ensemble(np.ones((3, 2)), np.zeros(5))


# ---------------------------------------------------------------------------
# coverage95
# ---------------------------------------------------------------------------

def test_coverage_infinite_intervals_is_one():
    truth = np.random.default_rng(1).normal(size=20) * 1e6
    assert coverage95(np.full(20, -np.inf), np.full(20, np.inf), truth) == 1.0


def test_coverage_zero_width_missing_truth_is_zero():
    truth = np.arange(5.0)
    centers = truth + 0.5
    assert coverage95(centers, centers, truth) == 0.0


def test_coverage_ordering_violation_raises():
    with pytest.raises(ValueError, match="ordering"):
        coverage95(np.array([1.0, 3.0]), np.array([2.0, 2.0]), np.zeros(2))


def test_coverage_partial_fraction():
    truth = np.array([0.0, 10.0, -1.0, 0.5])
    lo = np.array([-1.0, 0.0, 0.0, 0.0])
    hi = np.array([1.0, 1.0, 1.0, 1.0])
    assert coverage95(lo, hi, truth) == pytest.approx(0.5)


def test_coverage_calibrated_gaussian_near_095():
    rng = np.random.default_rng(99)
    n_nodes = 4000
    truth = rng.normal(size=n_nodes)
    draws = rng.normal(size=(2000, n_nodes))
    lo, hi = empirical_interval95(draws)
    cov = coverage95(lo, hi, truth)
    # binomial MC error at n=4000 is ~0.0034; allow 4 sigma
    assert abs(cov - 0.95) < 0.015


def test_empirical_interval_brackets_quantiles():
    rng = np.random.default_rng(5)
    draws = rng.uniform(0.0, 1.0, size=(100_000, 3))
    lo, hi = empirical_interval95(draws)
    assert np.allclose(lo, 0.025, atol=0.01)
    assert np.allclose(hi, 0.975, atol=0.01)
