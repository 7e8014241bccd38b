"""The acceptance suite: one function per criterion, each returning a :class:`CriterionResult`.

``quick`` mode shrinks replicate counts so that the whole suite runs in about a
minute; the tolerances are the same in both modes.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats as sps

from . import __version__
from .energy import energy_fast, energy_naive
from .experiments import CountStat, LinearStat, MartingaleStat, ReplicateJob, shared_table
from .geometry import Box, Configuration, parse_region, region_volume
from .partition import build_logz_table, logz, quadrature_z3_1d, validate_ratio_lower_bounds, z2_oracle
from .samplers import McmcParams, integrated_autocorr_time, mcmc_samples, sample_exact, stream
from .statistics import (
    LinearFunction,
    _plain,
    anticoncentration_check,
    conditional_mean_check,
    fit_scaling_exponent,
    independence_check,
    mean_zscore,
    moments,
    repulsion_check,
    run_replicates,
)

GRID = (16, 32, 64, 128, 256)
THIRD = 1.0 / 3.0


@dataclass
class CriterionResult:
    id: int
    title: str
    passed: bool
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"id": self.id, "title": self.title, "passed": bool(self.passed),
                "details": _plain(self.details)}

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] criterion {self.id:2d}: {self.title}"


def _sub_seed(seed: int, cid: int) -> int:
    return int(np.random.SeedSequence([seed, cid]).generate_state(1, np.uint64)[0] >> np.uint64(1))


def third_box(d: int) -> Box:
    return Box((0.0,) * d, (THIRD,) + (1.0,) * (d - 1))


def half_box(d: int) -> Box:
    return Box((0.0,) * d, (0.5,) + (1.0,) * (d - 1))


# ---- 1-3: partition function ----------------------------------------------------

def c01_z2_oracle(seed: int, quick: bool) -> CriterionResult:
    rows, ok = [], True
    for d in (1, 2, 3):
        for beta in (0.5, 1.0, 2.0, 4.0):
            lo, hi = logz(build_logz_table(d, beta, 2), 2)
            orc = z2_oracle(d, beta)
            target = math.log(orc["series"])
            row = {"d": d, "beta": beta, "lo": lo, "hi": hi, "oracle": target,
                   "contained": lo <= target <= hi}
            ok = ok and row["contained"]
            if d == 1:
                closed = math.log(orc["closed_form"])
                mid = 0.5 * (lo + hi)
                row["closed_form_error"] = abs(math.exp(mid) - orc["closed_form"]) / orc["closed_form"]
                ok = ok and row["closed_form_error"] <= 1e-12 and lo <= closed <= hi
            rows.append(row)
    return CriterionResult(1, "Z(2) intervals contain the two-point oracle", ok, {"rows": rows})


def c02_quadrature(seed: int, quick: bool) -> CriterionResult:
    lo, hi = logz(build_logz_table(1, 1.0, 3), 3)
    quad = quadrature_z3_1d(1.0, depth=10)
    mid = math.exp(0.5 * (lo + hi))
    rel = abs(mid - quad) / quad
    return CriterionResult(2, "1D Z(3) matches dyadic-grid quadrature", rel <= 1e-9,
                           {"table": mid, "quadrature": quad, "relative_error": rel})


def c03_ratio_bounds(seed: int, quick: bool) -> CriterionResult:
    rows = []
    for d in (1, 2, 3):
        for beta in (0.5, 1.0, 2.0):
            rep = validate_ratio_lower_bounds(build_logz_table(d, beta, 20))
            rows.append({"d": d, "beta": beta, "passed": rep.passed,
                         "min_margin": min(rep.margins)})
    return CriterionResult(3, "log Z ratio lower bounds for n <= 20", all(r["passed"] for r in rows),
                           {"rows": rows})


# ---- 4-5: samplers -------------------------------------------------------------------

def _opposite_halves(samples: np.ndarray) -> np.ndarray:
    top = samples[..., 0] >> 52
    return (top[..., 0] != top[..., 1]).astype(float)


def c04_two_point(seed: int, quick: bool) -> CriterionResult:
    beta, N = 1.0, (20_000 if quick else 100_000)
    target = 1.0 - math.exp(-beta) / 2.0
    s = _sub_seed(seed, 4)
    table = build_logz_table(1, beta, 2)
    rng = stream(s, 0)
    exact = np.array([_opposite_halves(sample_exact(1, 2, beta, table, rng).points[None])[0]
                      for _ in range(N)])
    p_e = float(exact.mean())
    se_e = math.sqrt(p_e * (1 - p_e) / N)
    thin = 10
    params = McmcParams(steps=1000 + thin * N, burn_in=1000, thin=thin)
    samples, _ = mcmc_samples(1, 2, beta, params, stream(s, 1))
    ind = _opposite_halves(samples)
    tau = integrated_autocorr_time(ind)
    p_m = float(ind.mean())
    se_m = math.sqrt(p_m * (1 - p_m) * tau / ind.size)
    ok = abs(p_e - target) <= 3 * se_e and abs(p_m - target) <= 3 * se_m
    return CriterionResult(4, "two-point law, exact and MCMC", ok,
                           {"target": target, "exact": p_e, "exact_se": se_e, "mcmc": p_m,
                            "mcmc_se": se_m, "mcmc_tau": tau, "samples": N})


def _octant_counts(points: np.ndarray) -> np.ndarray:
    return np.all((points >> 52) == 0, axis=-1).sum(axis=-1)


def c05_cross_sampler(seed: int, quick: bool) -> CriterionResult:
    d, n, beta = 3, 8, 1.0
    N = 4_000 if quick else 20_000
    s = _sub_seed(seed, 5)
    table = build_logz_table(d, beta, n)
    rng = stream(s, 0)
    ex = np.array([_octant_counts(sample_exact(d, n, beta, table, rng).points) for _ in range(N)])
    thin = 25 * n
    params = McmcParams(steps=2_000 + thin * N, burn_in=2_000, thin=thin)
    samples, _ = mcmc_samples(d, n, beta, params, stream(s, 1))
    mc = _octant_counts(samples)
    tau = integrated_autocorr_time(mc.astype(float))
    ess = mc.size / tau
    cats = np.arange(n + 1)
    table2 = np.array([[np.sum(ex == c) for c in cats], [np.sum(mc == c) for c in cats]])
    table2 = table2[:, table2.sum(axis=0) > 0]
    # merge sparse categories into their neighbours so expected counts are at least 5
    merged = [table2[:, 0].copy()]
    for col in table2.T[1:]:
        if merged[-1].sum() < 10 or col.sum() < 10:
            merged[-1] = merged[-1] + col
        else:
            merged.append(col.copy())
    cont = np.array(merged).T
    chi2, p, dof, _ = sps.chi2_contingency(cont)
    need = 2_000 if quick else 10_000
    ok = p > 1e-3 and ess >= need
    return CriterionResult(5, "exact vs MCMC octant-count histograms (3D, n=8)", ok,
                           {"p_value": p, "chi2": chi2, "dof": dof, "mcmc_ess": ess,
                            "mcmc_tau": tau, "exact_samples": N})


def c06_energy_identity(seed: int, quick: bool) -> CriterionResult:
    rng = stream(_sub_seed(seed, 6), 0)
    per_dim = 200 if quick else 1000
    worst = 0.0
    for d in (1, 2, 3):
        for _ in range(per_dim):
            n = int(rng.integers(0, 65))
            c = Configuration(d, 1.0, rng.integers(0, 2**53, size=(n, d), dtype=np.int64))
            a, b = energy_fast(c), energy_naive(c)
            worst = max(worst, abs(a - b) / max(abs(b), 1.0))
    return CriterionResult(6, "energy_fast equals energy_naive", worst <= 1e-9,
                           {"configurations_per_dim": per_dim, "max_relative_error": worst})


# ---- 7-10: moments and exponents ----------------------------------------------------------

def _regions_7(d: int) -> list:
    return [Box((0.1,) * d, (0.7,) * d), parse_region("ball:" + ",".join(["0.5"] * d) + ",0.3", d)]


def c07_martingale(seed: int, quick: bool) -> CriterionResult:
    R = 2_000 if quick else 10_000
    s = _sub_seed(seed, 7)
    rows, ok, j = [], True, 6
    for d in (1, 2, 3):
        table = shared_table(d, 1.0, 64)
        regions = _regions_7(d)
        stats = tuple(x for U in regions for x in (CountStat(U), MartingaleStat(U, j)))
        for n in (16, 64):
            vals = run_replicates(ReplicateJob("exact", d, n, 1.0, stats, table), R, s, (d, n))
            col = 0
            for U in regions:
                cnt, M = vals[:, col], vals[:, col + 1: col + 2 + j]
                col += 2 + j
                vol = region_volume(U)
                zs = [mean_zscore(cnt - vol * n)]
                zs += [mean_zscore(M[:, i] - M[:, i - 1]) for i in range(1, j + 1)]
                row_ok = all(abs(z) <= 4 for z in zs)
                ok = ok and row_ok
                rows.append({"d": d, "n": n, "region": str(U), "z_mean": zs[0],
                             "z_increments": zs[1:], "passed": row_ok})
    return CriterionResult(7, "E N(U) = Leb(U) n and martingale increments vanish", ok,
                           {"replicates": R, "rows": rows})


def _variance_rows(vals: np.ndarray, ns) -> list[dict]:
    out = []
    for n, x in zip(ns, vals):
        m = moments(x)
        out.append({"n": n, "mean": m.mean, "variance": m.variance, "se_variance": m.se_variance})
    return out


def _fit(rows):
    f = fit_scaling_exponent([r["n"] for r in rows], [r["variance"] for r in rows],
                             [r["se_variance"] for r in rows])
    return {"slope": f.slope, "ci": f.ci, "slope_se": f.slope_se, "chi2_dof": f.chi2_dof}


def _grid_stats(method, d, beta, stats, R, seed, role):
    table = shared_table(d, beta, max(GRID)) if method == "exact" else None
    per_n = [run_replicates(ReplicateJob(method, d, n, beta, stats, table), R, seed, (n, role))
             for n in GRID]
    return [np.asarray(v) for v in per_n]


def c08_hyperuniform_3d(seed: int, quick: bool) -> CriterionResult:
    d, beta = 3, 1.0
    R = 1_000 if quick else 10_000
    s = _sub_seed(seed, 8)
    half, third = half_box(d), third_box(d)
    hier = _grid_stats("exact", d, beta, (CountStat(half), CountStat(third)), R, s, 0)
    iid = _grid_stats("iid", d, beta, (CountStat(half),), R, s, 1)
    h_rows = _variance_rows([v[:, 0] for v in hier], GRID)
    t_rows = _variance_rows([v[:, 1] for v in hier], GRID)
    i_rows = _variance_rows([v[:, 0] for v in iid], GRID)
    fh, ft, fi = _fit(h_rows), _fit(t_rows), _fit(i_rows)
    disjoint = fh["ci"][1] < fi["ci"][0] or fi["ci"][1] < fh["ci"][0]
    ok = 0.45 <= fh["slope"] <= 0.85 and 0.9 <= fi["slope"] <= 1.1 and disjoint
    return CriterionResult(8, "3D variance exponent of N(half-cube) in [0.45, 0.85]", ok, {
        "region": str(half), "replicates": R, "hierarchical": fh, "iid": fi,
        "cis_disjoint": disjoint, "per_n": h_rows, "iid_per_n": i_rows,
        "companion_non_gating": {"region": str(third), **ft, "per_n": t_rows}})


def _low_dim_runs(seed: int, quick: bool):
    """Shared samples of criteria 9 and 10: N(third box) in 1D and 2D, plus X(f) in 2D."""
    beta = 2.0
    R = 1_500 if quick else 10_000
    s = _sub_seed(seed, 9)
    f = LinearFunction((1.0, 1.0))
    two = _grid_stats("exact", 2, beta, (CountStat(third_box(2)), LinearStat(f)), R, s, 2)
    one = _grid_stats("exact", 1, beta, (CountStat(third_box(1)),), R, s, 1)
    return beta, R, two, one


def c09_low_dim(seed: int, quick: bool, runs=None) -> CriterionResult:
    beta, R, two, one = runs or _low_dim_runs(seed, quick)
    r2 = _variance_rows([v[:, 0] for v in two], GRID)
    r1 = _variance_rows([v[:, 0] for v in one], GRID)
    f2, f1 = _fit(r2), _fit(r1)
    ok = 0.30 <= f2["slope"] <= 0.70 and f1["slope"] <= 0.2
    return CriterionResult(9, "2D slope in [0.30, 0.70] and 1D slope <= 0.2", ok, {
        "beta": beta, "replicates": R, "d2": {"region": str(third_box(2)), **f2, "per_n": r2},
        "d1": {"region": str(third_box(1)), **f1, "per_n": r1}})


def c10_linear_contrast(seed: int, quick: bool, runs=None) -> CriterionResult:
    beta, R, two, _ = runs or _low_dim_runs(seed, quick)
    rc = _variance_rows([v[:, 0] for v in two], GRID)
    rl = _variance_rows([v[:, 1] for v in two], GRID)
    fc, fl = _fit(rc), _fit(rl)
    ok = fl["slope"] <= 0.25 and fc["slope"] - fl["slope"] >= 0.1
    return CriterionResult(10, "2D Var X(x1+x2) slope <= 0.25 and >= 0.1 below the box slope", ok, {
        "beta": beta, "replicates": R, "linear": {**fl, "per_n": rl},
        "count": {"region": str(third_box(2)), **fc}, "gap": fc["slope"] - fl["slope"]})


# ---- 11-13: structural checks -------------------------------------------------------------

def c11_conditional(seed: int, quick: bool) -> CriterionResult:
    R = 2_000 if quick else 10_000
    s = _sub_seed(seed, 11)
    rows, ok = [], True
    for d in (2, 3):
        table = shared_table(d, 1.0, 16)
        for n in (12, 16):
            cm = conditional_mean_check(d, n, 1.0, 1, R, stream(s, d, n, 0), table)
            ind = independence_check(d, n, 1.0, R, stream(s, d, n, 1), table)
            ok = ok and cm.passed and ind.passed
            rows.append({"d": d, "n": n, "conditional_mean": cm.to_dict(), "independence": ind.to_dict()})
    return CriterionResult(11, "conditional mean and conditional independence", ok, {"rows": rows})


def c12_repulsion(seed: int, quick: bool) -> CriterionResult:
    R = 2_000 if quick else 10_000
    rep = repulsion_check(3, 2, 2.0, 4, R, stream(_sub_seed(seed, 12), 0),
                          shared_table(3, 2.0, 2))
    return CriterionResult(12, "P(N(D) >= 2) below the exponential bound (3D, j=4)", rep.passed,
                           rep.details)


def c13_anticoncentration(seed: int, quick: bool) -> CriterionResult:
    R = 2_000 if quick else 10_000
    s = _sub_seed(seed, 13)
    rows, ok = [], True
    for d in (2, 3):
        table = shared_table(d, 1.0, 64)
        for i, target in enumerate((third_box(d), LinearFunction((1.0,) * d))):
            rep = anticoncentration_check(d, 64, 1.0, target, 0.1, R, stream(s, d, i), table)
            ok = ok and rep.passed
            rows.append(rep.details)
    return CriterionResult(13, "max window frequency <= 0.95 at width 0.1 n^gamma", ok, {"rows": rows})


# ---- suite --------------------------------------------------------------------------------

CRITERIA: tuple[Callable[[int, bool], CriterionResult], ...] = (
    c01_z2_oracle, c02_quadrature, c03_ratio_bounds, c04_two_point, c05_cross_sampler,
    c06_energy_identity, c07_martingale, c08_hyperuniform_3d)


def run_core(seed: int, quick: bool, only: set[int] | None = None,
             echo: Callable[[str], None] | None = None) -> list[CriterionResult]:
    """Criteria 1-13."""
    out = []

    def keep(r):
        out.append(r)
        if echo:
            echo(r.line())

    for fn in CRITERIA:
        cid = int(fn.__name__[1:3])
        if only is None or cid in only:
            keep(fn(seed, quick))
    if only is None or only & {9, 10}:
        runs = _low_dim_runs(seed, quick)
        if only is None or 9 in only:
            keep(c09_low_dim(seed, quick, runs))
        if only is None or 10 in only:
            keep(c10_linear_contrast(seed, quick, runs))
    for fn in (c11_conditional, c12_repulsion, c13_anticoncentration):
        cid = int(fn.__name__[1:3])
        if only is None or cid in only:
            keep(fn(seed, quick))
    return out


def report_bytes(results: list[CriterionResult], seed: int, quick: bool) -> bytes:
    doc = {"version": __version__, "seed": seed, "mode": "quick" if quick else "full",
           "passed": all(r.passed for r in results), "criteria": [r.to_dict() for r in results]}
    return (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode()


def c14_determinism(seed: int, first: bytes | None = None) -> CriterionResult:
    """Re-runs the quick suite and compares its report byte for byte with ``first`` (or a second run)."""
    if first is None:
        first = report_bytes(run_core(seed, True), seed, True)
    second = report_bytes(run_core(seed, True), seed, True)
    same = first == second
    return CriterionResult(14, "repeated quick runs give byte-identical reports", same,
                           {"bytes": len(first), "identical": same})


def verify(seed: int = 0, quick: bool = False, only: set[int] | None = None,
           echo: Callable[[str], None] | None = None) -> tuple[list[CriterionResult], dict]:
    """Run the suite; returns the results and wall-clock seconds per criterion group."""
    t0 = time.perf_counter()
    core = run_core(seed, quick, only, echo)
    timing = {"core": time.perf_counter() - t0}
    results = list(core)
    if only is None or 14 in only:
        t1 = time.perf_counter()
        first = report_bytes(core, seed, True) if quick and only is None else None
        r14 = c14_determinism(seed, first)
        timing["determinism"] = time.perf_counter() - t1
        results.append(r14)
        if echo:
            echo(r14.line())
    return results, timing
