import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiercoulomb.geometry import Ball, Box, UnitCube, region_volume
from hiercoulomb.partition import build_logz_table
from hiercoulomb.samplers import sample_exact, sample_iid, split_distribution, stream
from hiercoulomb.statistics import (
    ExperimentReport,
    LinearFunction,
    Martingale,
    anticoncentration_check,
    conditional_mean_check,
    count_in_region,
    fit_scaling_exponent,
    independence_check,
    jackknife_variance_se,
    linear_statistic,
    martingale_value,
    max_window_frequency,
    mean_zscore,
    moments,
    repulsion_bound,
    repulsion_check,
    replicate_moments,
    run_replicates,
)


def exact_count_variance_1d(beta, n, a, depth=30):
    """Var N([0, a)) in 1D from the split law, following the boundary cube down the tree."""
    t = build_logz_table(1, beta, n)
    dist = split_distribution(t, n)
    P = np.zeros((n + 1, n + 1))
    for m in range(n + 1):
        c = np.arange(m + 1)
        lw = dist.u[c] + dist.u[m - c]
        p = np.exp(lw - lw.max())
        P[m, : m + 1] = p / p.sum()
    bits, x = [], a
    for _ in range(depth):
        x *= 2
        bits.append(int(x))
        x -= int(x)
    G = np.zeros((n + 1, n + 1))
    G[:, 0] = 1.0  # below the last level the boundary cube contributes nothing
    for b in reversed(bits):
        new = np.zeros_like(G)
        for m in range(n + 1):
            for m1 in range(m + 1):
                if b:  # left child inside, right child carries the boundary
                    new[m, m1:] += P[m, m1] * G[m - m1, : n + 1 - m1]
                else:
                    new[m] += P[m, m1] * G[m1]
        G = new
    k = np.arange(n + 1)
    mu = G[n] @ k
    return float(G[n] @ (k - mu) ** 2)


def test_linear_function():
    f = LinearFunction((3.0, 4.0), 1.0)
    assert f.lipschitz == 5.0 and not f.is_constant
    assert LinearFunction((0.0, 0.0), 2.0).is_constant
    with pytest.raises(ValueError):
        LinearFunction((math.inf,))


def test_counts_and_linear_statistics():
    rng = stream(0)
    c = sample_iid(2, 50, rng)
    assert count_in_region(c, UnitCube(2)) == 50
    left, right = Box((0, 0), (0.3, 1)), Box((0.3, 0), (1, 1))
    assert count_in_region(c, left) + count_in_region(c, right) == 50
    assert linear_statistic(c, LinearFunction((0.0, 0.0), 2.5)) == 125.0
    assert linear_statistic(c, LinearFunction((1.0, 0.0))) == pytest.approx(c.as_floats()[:, 0].sum())


def test_mean_count_unbiased_3d():
    t = build_logz_table(3, 1.0, 16)
    rng = stream(1)
    U = Ball((0.4, 0.5, 0.6), 0.3)
    x = np.array([count_in_region(sample_exact(3, 16, 1.0, t, rng), U) for _ in range(10_000)])
    assert abs(x.mean() - region_volume(U) * 16) <= 4 * x.std() / math.sqrt(x.size)


def test_linear_mean_is_half_n():
    t = build_logz_table(2, 1.0, 32)
    rng = stream(2)
    f = LinearFunction((1.0, 0.0))
    x = np.array([linear_statistic(sample_exact(2, 32, 1.0, t, rng), f) for _ in range(5000)])
    assert abs(x.mean() - 16) <= 4 * x.std() / math.sqrt(x.size)


def test_martingale_examples():
    rng = stream(3)
    c = sample_iid(2, 40, rng)
    U = Box((0.0, 0.25), (0.5, 1.0))
    for j in (2, 3, 6):
        assert martingale_value(c, U, j) == count_in_region(c, U)
    V = Ball((0.5, 0.5), 0.3)
    assert martingale_value(c, V, 0) == pytest.approx(region_volume(V) * 40, rel=1e-12)
    assert martingale_value(c, UnitCube(2), 4) == 40
    path = Martingale(Box((0.0,), (0.3,)), 20).path(sample_iid(1, 10, rng).points)
    assert path[0] == pytest.approx(3.0)


def test_martingale_mean_constant():
    t = build_logz_table(2, 1.0, 16)
    rng = stream(4)
    U = Ball((0.45, 0.55), 0.3)
    M = Martingale(U, 6)
    paths = np.array([M.path(sample_exact(2, 16, 1.0, t, rng).points) for _ in range(10_000)])
    for j in range(1, 7):
        assert abs(mean_zscore(paths[:, j] - paths[:, j - 1])) <= 4
    assert abs(mean_zscore(paths[:, 6] - region_volume(U) * 16)) <= 4


def test_martingale_level_limit():
    with pytest.raises(ValueError):
        Martingale(UnitCube(1), 21)


def test_jackknife_matches_brute_force():
    x = np.random.default_rng(0).normal(size=60)
    loo = np.array([np.var(np.delete(x, i), ddof=1) for i in range(x.size)])
    brute = math.sqrt((x.size - 1) / x.size * np.sum((loo - loo.mean()) ** 2))
    assert jackknife_variance_se(x) == pytest.approx(brute, rel=1e-10)


def test_replicate_moments():
    rng = stream(5)
    const = replicate_moments(lambda r: sample_iid(1, 5, r), lambda c: 7.0, 50, rng)
    assert const.variance == 0 and const.mean == 7.0
    half = Box((0, 0, 0), (0.5, 1, 1))
    m = replicate_moments(lambda r: sample_iid(3, 100, r), lambda c: count_in_region(c, half), 3000, rng)
    assert abs(m.variance - 25) <= 4 * m.se_variance
    with pytest.raises(ValueError):
        moments([1.0])


def test_replicate_moments_two_point_exact():
    beta = 1.0
    t = build_logz_table(1, beta, 2)
    p = 1 - math.exp(-beta) / 2
    # N([0, 1/2)) is 1 with probability p and 0 or 2 otherwise, so Var = 1 - p
    m = replicate_moments(lambda r: sample_exact(1, 2, beta, t, r),
                          lambda c: count_in_region(c, Box((0.0,), (0.5,))), 20_000, stream(6))
    assert abs(m.variance - (1 - p)) <= 3 * m.se_variance


@pytest.mark.parametrize("beta", [1.0, 2.0])
def test_count_variance_matches_exact_recursion_1d(beta):
    n, R = 32, 6000
    t = build_logz_table(1, beta, n)
    U = Box((0.0,), (1 / 3,))
    m = replicate_moments(lambda r: sample_exact(1, n, beta, t, r),
                          lambda c: count_in_region(c, U), R, stream(7))
    target = exact_count_variance_1d(beta, n, 1 / 3)
    assert abs(m.variance - target) <= 4 * m.se_variance
    assert abs(m.mean - n / 3) <= 4 * m.se_mean


def test_fit_scaling_exponent_examples():
    ns = [16, 32, 64, 128, 256]
    assert fit_scaling_exponent(ns, [3.0 * n for n in ns]).slope == pytest.approx(1.0)
    f = fit_scaling_exponent(ns, [2.0 * n ** (2 / 3) for n in ns], [0.1] * 5)
    assert f.slope == pytest.approx(2 / 3) and f.ci[0] <= f.slope <= f.ci[1]
    for bad in ((ns[:3], [1, 2, 3]), (ns, [1, 2, 0, 4, 5]), ([8] * 5, [1, 2, 3, 4, 5])):
        with pytest.raises(ValueError):
            fit_scaling_exponent(*bad)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 2.0), st.floats(0.01, 100.0))
def test_fit_recovers_power_laws(alpha, c):
    ns = [10, 20, 40, 80]
    assert fit_scaling_exponent(ns, [c * n**alpha for n in ns]).slope == pytest.approx(alpha, abs=1e-9)


def test_iid_baseline_slope():
    ns, rows = [16, 32, 64, 128, 256], []
    half = Box((0, 0), (0.5, 1))
    for n in ns:
        rng = stream(8, n)
        rows.append(moments([count_in_region(sample_iid(2, n, rng), half) for _ in range(2000)]))
    f = fit_scaling_exponent(ns, [r.variance for r in rows], [r.se_variance for r in rows])
    assert 0.9 <= f.slope <= 1.1


def test_conditional_mean_check():
    assert conditional_mean_check(3, 0, 1.0, 1, 10, stream(0)).passed
    rep = conditional_mean_check(3, 16, 1.0, 1, 10_000, stream(9))
    assert rep.passed, rep.details
    rep = conditional_mean_check(2, 12, 1e-6, 1, 4000, stream(10))
    assert rep.passed, rep.details


def test_independence_check():
    assert independence_check(2, 12, 1.0, 20_000, stream(11)).passed
    assert independence_check(3, 16, 1e-6, 4000, stream(12)).passed


def test_repulsion_check():
    assert repulsion_check(3, 1, 2.0, 4, 100, stream(0)).details["max_frequency"] == 0.0
    rep = repulsion_check(3, 2, 2.0, 4, 5000, stream(13))
    assert rep.passed and rep.details["max_frequency"] == 0.0
    assert repulsion_bound(2, 2.0, 4) == pytest.approx(math.exp(-64 + 14 / 3))
    # a vacuous bound passes automatically
    assert repulsion_check(3, 10, 0.5, 1, 200, stream(14)).passed
    assert repulsion_check(2, 12, 1.0, 4, 500, stream(15)).passed


def test_max_window_frequency():
    assert max_window_frequency(np.array([1, 1, 2, 3]), 0.0) == 0.5
    assert max_window_frequency(np.array([1, 1, 2, 3]), 1.0) == 0.75
    assert max_window_frequency(np.array([]), 1.0) == 0.0


def test_anticoncentration():
    rep = anticoncentration_check(3, 64, 1.0, Box((0, 0, 0), (1 / 3, 1, 1)), 0.1, 2000, stream(16))
    assert rep.passed and rep.details["max_frequency"] < 0.95
    # a point mass is never more than the whole sample
    rep = anticoncentration_check(2, 16, 1.0, LinearFunction((1.0, 1.0)), 0.0, 1000, stream(17))
    assert rep.details["max_frequency"] < 1.0
    # an i.i.d. count in a CLT-sized window is almost surely covered
    vals = [count_in_region(sample_iid(3, 400, stream(18, i)), Box((0, 0, 0), (0.5, 1, 1)))
            for i in range(2000)]
    assert max_window_frequency(np.array(vals), 10 * math.sqrt(400)) > 0.99
    with pytest.raises(ValueError):
        anticoncentration_check(3, 8, 1.0, UnitCube(3), 0.1, 10, stream(0))


def test_run_replicates_independent_of_jobs():
    def job(rng, size):
        return rng.random(size)

    a = run_replicates(job, 600, 5, (1,), jobs=1)
    b = run_replicates(job, 600, 5, (1,), jobs=1)
    assert a.shape == (600,) and np.array_equal(a, b)


def test_experiment_report_invariants():
    with pytest.raises(ValueError):
        ExperimentReport("x", 1, 1.0, "unit", [4], per_n=[{"n": 4, "replicates": 1, "variance": 0.0}])
    with pytest.raises(ValueError):
        ExperimentReport("x", 1, 1.0, "unit", [4], ci=(1.0, 0.0))
    r = ExperimentReport("x", 1, 1.0, "unit", [4], verdicts={"a": True}, runtime=1.5)
    assert r.passed and "runtime" not in r.to_dict() and r.to_dict(timing=True)["runtime"] == 1.5


def exact_half_cube_variance_3d(beta, n):
    """The half-cube is four level-1 cubes, so its count law follows from the root split alone."""
    u = split_distribution(build_logz_table(3, beta, n), n).u[: n + 1]

    def conv(a, b):
        return np.array([np.logaddexp.reduce(a[: i + 1] + b[i::-1]) for i in range(n + 1)])

    half = conv(conv(u, u), conv(u, u))
    lw = half + half[::-1]
    p = np.exp(lw - lw.max())
    p /= p.sum()
    k = np.arange(n + 1)
    return float(p @ (k - p @ k) ** 2)


def test_half_cube_variance_matches_exact_split_law_3d():
    n = 64
    t = build_logz_table(3, 1.0, n)
    half = Box((0, 0, 0), (0.5, 1, 1))
    m = replicate_moments(lambda r: sample_exact(3, n, 1.0, t, r),
                          lambda c: count_in_region(c, half), 3000, stream(19))
    target = exact_half_cube_variance_3d(1.0, n)
    assert target == pytest.approx(0.5762, abs=1e-4)
    assert abs(m.variance - target) <= 4 * m.se_variance
