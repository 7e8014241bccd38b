"""Observables, replicate moments, scaling fits and conditional-law checks."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy import stats as sps

from .geometry import (
    BITS,
    Box,
    Configuration,
    DyadicCube,
    Region,
    classify_levels,
    contains_points,
    flat_cube_ids,
    flat_id,
)
from .partition import LogZTable, build_logz_table
from .samplers import sample_exact, stream

MAX_MARTINGALE_LEVEL = 20
BATCH = 256


# ---- observables ---------------------------------------------------------------

@dataclass(frozen=True)
class LinearFunction:
    """``f(x) = a . x + b``."""

    coeffs: tuple[float, ...]
    intercept: float = 0.0

    def __post_init__(self):
        vals = tuple(float(a) for a in self.coeffs)
        if not all(math.isfinite(a) for a in vals) or not math.isfinite(self.intercept):
            raise ValueError("coefficients must be finite")
        object.__setattr__(self, "coeffs", vals)

    @property
    def lipschitz(self) -> float:
        return math.hypot(*self.coeffs)

    @property
    def is_constant(self) -> bool:
        return all(a == 0.0 for a in self.coeffs)

    def __call__(self, xs: np.ndarray) -> np.ndarray:
        return np.asarray(xs, dtype=float) @ np.asarray(self.coeffs) + self.intercept


def count_in_region(c: Configuration, U: Region) -> int:
    return int(np.count_nonzero(contains_points(U, c.points)))


def linear_statistic(c: Configuration, f: LinearFunction) -> float:
    if len(f.coeffs) != c.dim:
        raise ValueError("function and configuration dimensions differ")
    return math.fsum(f(c.as_floats())) if c.n else 0.0


class Martingale:
    """Evaluates ``M_0..M_j`` for one region; the cube classification is computed once.

    A point contributes 1 once its level-``i`` cube (``i <= j``) lies inside the
    region, ``p(D)`` if its level-``j`` cube ``D`` is a boundary cube, and 0
    otherwise.
    """

    def __init__(self, U: Region, j: int):
        if not 0 <= j <= MAX_MARTINGALE_LEVEL:
            raise ValueError(f"martingale level must lie in [0, {MAX_MARTINGALE_LEVEL}]")
        if U.dim * j > 62:
            raise ValueError("level too deep for flat cube ids in this dimension")
        self.U, self.j = U, j
        self.inside, self.boundary, self.fracs = [], [], []
        for lv in classify_levels(U, j):
            self.inside.append(np.sort(np.array([flat_id(D) for D in lv.inside], dtype=np.int64)))
            ids = np.array([flat_id(D) for D in lv.boundary], dtype=np.int64)
            order = np.argsort(ids)
            self.boundary.append(ids[order])
            self.fracs.append(np.array(lv.fractions, dtype=float)[order])

    @staticmethod
    def _member(sorted_ids: np.ndarray, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if sorted_ids.size == 0:
            return np.zeros(ids.shape, bool), np.zeros(ids.shape, np.int64)
        pos = np.minimum(np.searchsorted(sorted_ids, ids), sorted_ids.size - 1)
        return sorted_ids[pos] == ids, pos

    def path(self, points: np.ndarray) -> np.ndarray:
        """``[M_0, ..., M_j]`` for fixed-point ``points``."""
        pts = np.asarray(points, dtype=np.int64)
        out = np.zeros(self.j + 1)
        done = np.zeros(pts.shape[0], dtype=bool)
        for i in range(self.j + 1):
            ids = flat_cube_ids(pts, i)
            hit, _ = self._member(self.inside[i], ids)
            done |= hit
            on, pos = self._member(self.boundary[i], ids)
            on &= ~done
            out[i] = np.count_nonzero(done) + math.fsum(self.fracs[i][pos[on]])
        return out


def martingale_value(c: Configuration, U: Region, j: int) -> float:
    """``M_j``: resolved counts through level ``j`` plus boundary cubes weighted by ``p(D)``."""
    return float(Martingale(U, j).path(c.points)[j])


# ---- replicate moments --------------------------------------------------------------

@dataclass
class Moments:
    replicates: int
    mean: float
    variance: float
    se_mean: float
    se_variance: float


def jackknife_variance_se(x: np.ndarray) -> float:
    """Jackknife standard error of the sample variance, by the closed leave-one-out formula."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 3:
        return float("nan")
    dev2 = (x - x.mean()) ** 2
    s2 = dev2.sum() / (n - 1)
    loo = ((n - 1) * s2 - n / (n - 1) * dev2) / (n - 2)
    return float(math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))


def mean_zscore(x: np.ndarray, atol: float = 1e-9) -> float:
    """``mean / SE``; a sample that is constant up to ``atol`` scores 0 when its mean is within ``atol`` of 0."""
    x = np.asarray(x, dtype=float)
    m = float(x.mean())
    se = float(x.std(ddof=1) / math.sqrt(x.size))
    if se <= atol:
        return 0.0 if abs(m) <= atol else math.copysign(math.inf, m)
    return m / se


def moments(values: Sequence[float]) -> Moments:
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two replicates")
    mean = math.fsum(x) / x.size
    var = math.fsum((x - mean) ** 2) / (x.size - 1)
    return Moments(int(x.size), mean, var, math.sqrt(var / x.size), jackknife_variance_se(x))


def _run_batch(args) -> np.ndarray:
    job, seed, key, b, size = args
    return np.asarray(job(stream(seed, *key, b), size))


def run_replicates(job: Callable[[np.random.Generator, int], Any], R: int, seed: int,
                   key: Sequence[int] = (), jobs: int = 1) -> np.ndarray:
    """``R`` replicate values, stacked along axis 0; ``job(rng, size)`` returns ``size`` of them.

    Replicates are grouped in fixed batches, each with its own stream keyed by
    ``(seed, *key, batch)``, so the output does not depend on ``jobs``.
    """
    sizes = [min(BATCH, R - s) for s in range(0, R, BATCH)]
    tasks = [(job, seed, tuple(key), b, size) for b, size in enumerate(sizes)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(_run_batch, tasks))
    else:
        parts = [_run_batch(t) for t in tasks]
    return np.concatenate(parts, axis=0) if parts else np.empty(0)


def replicate_moments(sampler: Callable[[np.random.Generator], Configuration],
                      statistic: Callable[[Configuration], float], R: int,
                      rng: np.random.Generator) -> Moments:
    """Mean, variance and their standard errors of ``statistic`` over ``R`` draws."""
    if R < 2:
        raise ValueError("need R >= 2")
    return moments([statistic(sampler(rng)) for _ in range(R)])


# ---- scaling fits --------------------------------------------------------------------

@dataclass
class ScalingFit:
    slope: float
    intercept: float
    ci: tuple[float, float]
    slope_se: float
    chi2_dof: float


def fit_scaling_exponent(ns: Sequence[float], variances: Sequence[float],
                         ses: Sequence[float] | None = None, level: float = 0.95) -> ScalingFit:
    """Weighted least squares of ``log var`` on ``log n``.

    ``ses`` are standard errors of the variances; ``log var`` then has standard
    error ``se / var``. The slope covariance uses these errors, inflated by the
    reduced chi-square when the points scatter more than they claim. Without
    ``ses`` an ordinary fit with residual covariance is used.
    """
    x = np.log(np.asarray(ns, dtype=float))
    v = np.asarray(variances, dtype=float)
    if x.size < 4 or v.size != x.size:
        raise ValueError("need at least four grid points")
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise ValueError("variances must be positive")
    if np.ptp(x) == 0:
        raise ValueError("degenerate grid")
    y = np.log(v)
    if ses is None:
        sig = np.ones_like(y)
        known = False
    else:
        sig = np.asarray(ses, dtype=float) / v
        known = bool(np.all(sig > 0) and np.all(np.isfinite(sig)))
        if not known:
            sig = np.ones_like(y)
    A = np.column_stack([x, np.ones_like(x)]) / sig[:, None]
    coef, *_ = np.linalg.lstsq(A, y / sig, rcond=None)
    resid = (y - coef[0] * x - coef[1]) / sig
    dof = x.size - 2
    chi2 = float(resid @ resid / dof)
    cov = np.linalg.inv(A.T @ A) * (max(1.0, chi2) if known else chi2)
    se = math.sqrt(cov[0, 0])
    z = sps.norm.ppf(0.5 + level / 2)
    slope = float(coef[0])
    return ScalingFit(slope, float(coef[1]), (slope - z * se, slope + z * se), se, chi2)


# ---- reports ----------------------------------------------------------------------------

@dataclass
class CheckReport:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "details": _plain(self.details)}


@dataclass
class ExperimentReport:
    experiment: str
    dim: int
    beta: float
    region: str
    ns: list
    per_n: list = field(default_factory=list)
    slope: float | None = None
    ci: tuple[float, float] | None = None
    baseline_slope: float | None = None
    verdicts: dict = field(default_factory=dict)
    seed: int = 0
    runtime: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for row in self.per_n:
            if "variance" in row and row.get("replicates", 2) < 2:
                raise ValueError("a variance needs at least two replicates")
        if self.ci is not None and not self.ci[0] <= self.ci[1]:
            raise ValueError("confidence interval bounds out of order")

    @property
    def passed(self) -> bool:
        return all(bool(v) for v in self.verdicts.values())

    def to_dict(self, timing: bool = False) -> dict:
        out = _plain(asdict(self))
        out["passed"] = self.passed
        if not timing:
            out.pop("runtime")
        return out


def _plain(obj):
    """JSON-ready copy: numpy scalars to Python, tuples to lists, floats kept at full precision."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    return obj


# ---- conditional-law checks -------------------------------------------------------------

def _table(d, beta, n, table):
    return table if table is not None else build_logz_table(d, beta, max(n, 2))


def conditional_mean_check(d: int, n: int, beta: float, k: int, R: int,
                           rng: np.random.Generator, table: LogZTable | None = None,
                           z: float = 4.0, min_bin: int = 100) -> CheckReport:
    """Child count against its parent: ``E(N(D') | F_k) = N(D) / 2^d``.

    ``D`` is the level-``k`` cube at the origin and ``D'`` its first child.
    """
    if n == 0:
        return CheckReport("conditional_mean", True, {"n": 0, "mean_diff": 0.0})
    table = _table(d, beta, n, table)
    parent = np.empty(R, dtype=np.int64)
    child = np.empty(R, dtype=np.int64)
    for r in range(R):
        pts = sample_exact(d, n, beta, table, rng).points
        inside = np.all((pts >> (BITS - k)) == 0, axis=1) if k else np.ones(n, bool)
        parent[r] = np.count_nonzero(inside)
        child[r] = np.count_nonzero(np.all((pts >> (BITS - k - 1)) == 0, axis=1))
    diff = child - parent / 2**d
    mean = float(diff.mean())
    se = float(diff.std(ddof=1) / math.sqrt(R)) if R > 1 else 0.0
    ok = abs(mean) <= z * se if se > 0 else abs(mean) < 1e-12
    bins = []
    for m in np.unique(parent):
        sel = child[parent == m]
        if sel.size < min_bin:
            continue
        bm = float(sel.mean())
        bse = float(sel.std(ddof=1) / math.sqrt(sel.size))
        target = m / 2**d
        bok = abs(bm - target) <= z * bse if bse > 0 else abs(bm - target) < 1e-12
        ok = ok and bok
        bins.append({"m": int(m), "count": int(sel.size), "mean": bm, "se": bse,
                     "target": target, "passed": bool(bok)})
    return CheckReport("conditional_mean", bool(ok),
                       {"d": d, "n": n, "beta": beta, "k": k, "R": R, "mean_diff": mean,
                        "se": se, "bins": bins})


def repulsion_bound(n: int, beta: float, j: int) -> float:
    """Upper bound on ``P(N(D) >= 2)`` for a level-``j`` cube in 3D."""
    return math.exp(min(-(2.0 ** (j + 1)) * beta + 7.0 * beta / 3.0 * math.comb(n, 2), 700.0))


def repulsion_check(d: int, n: int, beta: float, j: int, R: int, rng: np.random.Generator,
                    table: LogZTable | None = None, z: float = 4.0) -> CheckReport:
    """Pair-occupation frequency of level-``j`` cubes against the exponential bound (3D).

    In 1D and 2D the check asserts only that the count in a fixed box
    ``[0, 1/3) x [0, 1)`` has positive variance.
    """
    if n < 2:
        return CheckReport("repulsion", True, {"n": n, "max_frequency": 0.0})
    table = _table(d, beta, n, table)
    if d != 3:
        A = Box((0.0,) * d, (1.0 / 3.0,) + (1.0,) * (d - 1))
        counts = np.array([count_in_region(sample_exact(d, n, beta, table, rng), A)
                           for _ in range(R)])
        var = float(counts.var(ddof=1))
        return CheckReport("repulsion", var > 0, {"d": d, "n": n, "beta": beta, "region": str(A),
                                                  "variance": var, "R": R})
    bound = repulsion_bound(n, beta, j)
    hits: dict[int, int] = {}
    for _ in range(R):
        ids = flat_cube_ids(sample_exact(d, n, beta, table, rng).points, j)
        u, c = np.unique(ids, return_counts=True)
        for cube in u[c >= 2]:
            hits[int(cube)] = hits.get(int(cube), 0) + 1
    worst_p, ok = 0.0, True
    for c in hits.values():
        p = c / R
        se = math.sqrt(p * (1 - p) / R)
        ok = ok and p <= bound + z * se
        worst_p = max(worst_p, p)
    return CheckReport("repulsion", bool(ok), {"d": d, "n": n, "beta": beta, "j": j, "R": R,
                                               "bound": bound, "max_frequency": worst_p,
                                               "cubes_hit": len(hits)})


def max_window_frequency(values: np.ndarray, width: float) -> float:
    """Largest fraction of ``values`` inside any closed window of length ``width``."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        return 0.0
    right = np.searchsorted(v, v + width, side="right")
    return float(np.max(right - np.arange(v.size)) / v.size)


def anticoncentration_exponent(d: int, linear: bool = False) -> float:
    if linear:
        return 1.0 / 6.0
    return {3: 1.0 / 3.0, 2: 1.0 / 4.0}.get(d, 0.0)


def anticoncentration_check(d: int, n: int, beta: float, U: Region | LinearFunction, c1: float,
                            R: int, rng: np.random.Generator, table: LogZTable | None = None,
                            threshold: float = 0.95) -> CheckReport:
    """Max frequency of ``N(U)`` (or ``X(f)``) in windows of width ``c1 * n**gamma``."""
    if R < 1000:
        raise ValueError("anti-concentration needs R >= 1000")
    table = _table(d, beta, n, table)
    linear = isinstance(U, LinearFunction)
    stat = (lambda c: linear_statistic(c, U)) if linear else (lambda c: count_in_region(c, U))
    vals = np.array([stat(sample_exact(d, n, beta, table, rng)) for _ in range(R)])
    width = c1 * n ** anticoncentration_exponent(d, linear)
    freq = max_window_frequency(vals, width)
    return CheckReport("anticoncentration", freq <= threshold,
                       {"d": d, "n": n, "beta": beta, "target": str(U), "c1": c1, "width": width,
                        "R": R, "max_frequency": freq})


def _pooled_within_corr(keys: list, a: np.ndarray, b: np.ndarray) -> tuple[float, float, int]:
    """Correlation of ``a`` and ``b`` after removing per-stratum means, with its standard error."""
    ra, rb = a.astype(float).copy(), b.astype(float).copy()
    groups: dict = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    for idx in groups.values():
        ix = np.asarray(idx)
        ra[ix] -= ra[ix].mean()
        rb[ix] -= rb[ix].mean()
    dof = len(keys) - len(groups)
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if dof < 3 or denom == 0:
        return 0.0, float("inf"), dof
    return float(ra @ rb) / denom, 1.0 / math.sqrt(dof - 1), dof


def independence_check(d: int, n: int, beta: float, R: int, rng: np.random.Generator,
                       table: LogZTable | None = None, z: float = 4.0) -> CheckReport:
    """Conditional independence of the internal splits of two occupied level-1 cubes.

    For each draw the first two level-1 cubes holding at least two points are
    chosen (a function of the level-1 counts alone); the statistic of each is
    the count in its first child. Draws are stratified by the chosen cubes and
    their counts, and the pooled within-stratum correlation must vanish.
    """
    table = _table(d, beta, n, table)
    keys, a, b = [], [], []
    for _ in range(R):
        pts = sample_exact(d, n, beta, table, rng).points
        lvl1 = flat_cube_ids(pts, 1)
        counts = np.bincount(lvl1, minlength=2**d)
        occ = np.flatnonzero(counts >= 2)
        if occ.size < 2:
            continue
        ca, cb = int(occ[0]), int(occ[1])
        lvl2 = flat_cube_ids(pts, 2)
        first = [flat_id(DyadicCube(1, tuple((c >> i) & 1 for i in range(d))).children()[0])
                 for c in (ca, cb)]
        keys.append((ca, cb, int(counts[ca]), int(counts[cb])))
        a.append(np.count_nonzero(lvl2 == first[0]))
        b.append(np.count_nonzero(lvl2 == first[1]))
    corr, se, dof = _pooled_within_corr(keys, np.array(a), np.array(b))
    ok = dof >= 3 and abs(corr) <= z * se
    return CheckReport("independence", bool(ok), {"d": d, "n": n, "beta": beta, "R": R,
                                                  "used": len(keys), "dof": dof,
                                                  "correlation": corr, "se": se})
