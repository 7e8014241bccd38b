"""Named replicate experiments producing :class:`ExperimentReport` objects."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .geometry import Configuration, GeometryError, Region, blowup_region, parse_region, region_volume
from .partition import LogZTable, build_logz_table
from .samplers import McmcParams, mcmc_samples, sample_exact, sample_iid, stream
from .statistics import (
    ExperimentReport,
    LinearFunction,
    Martingale,
    anticoncentration_check,
    conditional_mean_check,
    count_in_region,
    fit_scaling_exponent,
    independence_check,
    linear_statistic,
    mean_zscore,
    moments,
    repulsion_check,
    run_replicates,
)

EXPERIMENTS = ("variance-scaling", "martingale", "conditional", "repulsion",
               "anticoncentration", "linear-stats", "microscopic")
METHODS = ("exact", "mcmc", "iid")
DEFAULT_NS = (16, 32, 64, 128, 256)


class ConfigError(ValueError):
    """Malformed experiment configuration."""


# ---- picklable replicate jobs ----------------------------------------------------

@dataclass(frozen=True)
class CountStat:
    U: Region
    name: str = "count"

    def __call__(self, c: Configuration) -> np.ndarray:
        return np.array([count_in_region(c, self.U)], dtype=float)


@dataclass(frozen=True)
class LinearStat:
    f: LinearFunction
    name: str = "linear"

    def __call__(self, c: Configuration) -> np.ndarray:
        return np.array([linear_statistic(c, self.f)])


class MartingaleStat:
    def __init__(self, U: Region, j: int):
        self.U, self.j = U, j
        self.name = ",".join(f"M_{i}" for i in range(j + 1))
        self._m = None

    def __getstate__(self):
        return {"U": self.U, "j": self.j, "name": self.name, "_m": None}

    def __call__(self, c: Configuration) -> np.ndarray:
        if self._m is None:
            self._m = Martingale(self.U, self.j)
        return self._m.path(c.points)


@dataclass
class ReplicateJob:
    """Draws ``size`` configurations from one sampler and evaluates every statistic on each."""

    method: str
    dim: int
    n: int
    beta: float
    stats: tuple
    table: LogZTable | None = None
    mcmc: McmcParams | None = None

    def draws(self, rng: np.random.Generator, size: int):
        if self.method == "exact":
            return [sample_exact(self.dim, self.n, self.beta, self.table, rng) for _ in range(size)]
        if self.method == "iid":
            return [sample_iid(self.dim, self.n, rng, self.beta) for _ in range(size)]
        base = self.mcmc or McmcParams.defaults(self.n, self.beta)
        params = McmcParams(base.burn_in + base.thin * size, base.burn_in, base.thin,
                            base.local_move_prob, base.local_level_mean)
        samples, _ = mcmc_samples(self.dim, self.n, self.beta, params, rng)
        return [Configuration(self.dim, self.beta, s) for s in samples[:size]]

    def __call__(self, rng: np.random.Generator, size: int) -> np.ndarray:
        rows = [np.concatenate([s(c) for s in self.stats]) for c in self.draws(rng, size)]
        return np.asarray(rows, dtype=float).reshape(size, -1)

    def columns(self) -> list[str]:
        return [name for s in self.stats for name in s.name.split(",")]


# ---- config -------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    experiment: str
    dim: int
    beta: float
    region: str = "unit"
    ns: tuple = DEFAULT_NS
    replicates: int = 400
    method: str = "exact"
    seed: int = 0
    out: str | None = None
    options: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, cfg: dict) -> "ExperimentConfig":
        known = {"experiment", "dim", "beta", "region", "ns", "replicates", "method", "seed", "out"}
        missing = {"experiment", "dim", "beta"} - cfg.keys()
        if missing:
            raise ConfigError(f"missing keys: {sorted(missing)}")
        try:
            c = cls(experiment=str(cfg["experiment"]), dim=int(cfg["dim"]), beta=float(cfg["beta"]),
                    region=str(cfg.get("region", "unit")),
                    ns=tuple(int(n) for n in cfg.get("ns", DEFAULT_NS)),
                    replicates=int(cfg.get("replicates", 400)),
                    method=str(cfg.get("method", "exact")), seed=int(cfg.get("seed", 0)),
                    out=cfg.get("out"), options={k: v for k, v in cfg.items() if k not in known})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        c.validate()
        return c

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.dim not in (1, 2, 3):
            raise ConfigError("dim must be 1, 2 or 3")
        if not (self.beta >= 0 and math.isfinite(self.beta)):
            raise ConfigError("beta must be finite and nonnegative")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if not self.ns or min(self.ns) < 0:
            raise ConfigError("ns must be a nonempty list of counts")
        if self.replicates < 2:
            raise ConfigError("replicates must be >= 2")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")
        try:
            parse_region(self.region, self.dim)
        except GeometryError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        out = {"experiment": self.experiment, "dim": self.dim, "beta": self.beta,
               "region": self.region, "ns": list(self.ns), "replicates": self.replicates,
               "method": self.method, "seed": self.seed}
        out.update(self.options)
        return out


_TABLES: dict[tuple[int, float], LogZTable] = {}


def shared_table(d: int, beta: float, n_max: int) -> LogZTable:
    """Process-wide cache of the largest table built so far for ``(d, beta)``."""
    t = _TABLES.get((d, beta))
    if t is None or t.n_max < n_max:
        t = build_logz_table(d, beta, max(n_max, 2))
        _TABLES[(d, beta)] = t
    return t


def _job(cfg: ExperimentConfig, n: int, stats: tuple, method: str | None = None) -> ReplicateJob:
    method = method or cfg.method
    table = shared_table(cfg.dim, cfg.beta, max(cfg.ns)) if method == "exact" else None
    params = None
    if method == "mcmc":
        o = cfg.options
        base = McmcParams.defaults(n, cfg.beta)
        params = McmcParams(base.steps, int(o.get("burn_in", base.burn_in)),
                            int(o.get("thin", base.thin)),
                            float(o.get("local_move_prob", 0.5)),
                            float(o.get("local_level_mean", 2.0)))
    return ReplicateJob(method, cfg.dim, n, cfg.beta, stats, table, params)


def _linear_function(cfg: ExperimentConfig) -> LinearFunction:
    coeffs = cfg.options.get("coeffs", [1.0] * cfg.dim)
    if len(coeffs) != cfg.dim:
        raise ConfigError("coeffs must have one entry per dimension")
    return LinearFunction(tuple(coeffs), float(cfg.options.get("intercept", 0.0)))


def _collect(job: ReplicateJob, cfg: ExperimentConfig, key: tuple, jobs: int) -> np.ndarray:
    return run_replicates(job, cfg.replicates, cfg.seed, key, jobs)


def _tidy(rows: list, n: int, names: list[str], vals: np.ndarray, prefix: str = ""):
    for r, v in enumerate(vals):
        for name, x in zip(names, v):
            rows.append((n, r, prefix + name, float(x)))


def _moment_row(n: int, x: np.ndarray, **extra) -> dict:
    m = moments(x)
    row = {"n": n, "replicates": m.replicates, "mean": m.mean, "variance": m.variance,
           "se_mean": m.se_mean, "se_variance": m.se_variance}
    row.update(extra)
    return row


def _fit(rows: list[dict]):
    usable = [r for r in rows if r["variance"] > 0]
    if len(usable) < 4:
        return None
    return fit_scaling_exponent([r["n"] for r in usable], [r["variance"] for r in usable],
                                [r["se_variance"] for r in usable])


# ---- experiments ---------------------------------------------------------------------------

def _variance_scaling(cfg, U, jobs, tidy, label="count"):
    report = ExperimentReport(cfg.experiment, cfg.dim, cfg.beta, str(U), list(cfg.ns), seed=cfg.seed)
    vol = region_volume(U)
    for n in cfg.ns:
        x = _collect(_job(cfg, n, (CountStat(U),)), cfg, (n, 0), jobs)[:, 0]
        _tidy(tidy, n, [label], x[:, None])
        report.per_n.append(_moment_row(n, x, expected_mean=vol * n))
    fit = _fit(report.per_n)
    if fit is not None:
        report.slope, report.ci = fit.slope, fit.ci
        report.extra["slope_se"] = fit.slope_se
    if cfg.options.get("baseline", True):
        base_rows = []
        for n in cfg.ns:
            x = _collect(_job(cfg, n, (CountStat(U),), "iid"), cfg, (n, 1), jobs)[:, 0]
            _tidy(tidy, n, [label], x[:, None], prefix="iid_")
            base_rows.append(_moment_row(n, x))
        bfit = _fit(base_rows)
        report.extra["baseline"] = base_rows
        if bfit is not None:
            report.baseline_slope = bfit.slope
            report.extra["baseline_ci"] = bfit.ci
            if fit is not None:
                report.verdicts["separated_from_iid"] = bool(
                    fit.slope < bfit.slope - 0.15 and fit.ci[1] < bfit.ci[0])
    lo_hi = cfg.options.get("slope_range")
    if lo_hi is not None and fit is not None:
        report.verdicts["slope_in_range"] = bool(lo_hi[0] <= fit.slope <= lo_hi[1])
    return report


def _linear_stats(cfg, U, jobs, tidy):
    f = _linear_function(cfg)
    report = ExperimentReport(cfg.experiment, cfg.dim, cfg.beta, str(U), list(cfg.ns), seed=cfg.seed)
    count_rows = []
    for n in cfg.ns:
        vals = _collect(_job(cfg, n, (LinearStat(f), CountStat(U))), cfg, (n, 0), jobs)
        _tidy(tidy, n, ["linear", "count"], vals)
        report.per_n.append(_moment_row(n, vals[:, 0], expected_mean=n * (0.5 * sum(f.coeffs) + f.intercept)))
        count_rows.append(_moment_row(n, vals[:, 1]))
    fit, cfit = _fit(report.per_n), _fit(count_rows)
    report.extra.update({"function": {"coeffs": list(f.coeffs), "intercept": f.intercept},
                         "count": count_rows})
    if fit is not None:
        report.slope, report.ci = fit.slope, fit.ci
        report.extra["slope_se"] = fit.slope_se
    if cfit is not None:
        report.extra.update({"count_slope": cfit.slope, "count_ci": cfit.ci})
    if fit is not None and cfit is not None:
        report.verdicts["linear_slope_small"] = bool(
            fit.slope <= float(cfg.options.get("max_linear_slope", 0.25)))
        report.verdicts["gap_to_count_slope"] = bool(
            cfit.slope - fit.slope >= float(cfg.options.get("min_gap", 0.1)))
    return report


def _martingale(cfg, U, jobs, tidy, z=4.0):
    j = int(cfg.options.get("j", 6))
    report = ExperimentReport(cfg.experiment, cfg.dim, cfg.beta, str(U), list(cfg.ns), seed=cfg.seed)
    vol = region_volume(U)
    mstat = MartingaleStat(U, j)
    ok = True
    for n in cfg.ns:
        vals = _collect(_job(cfg, n, (CountStat(U), mstat)), cfg, (n, 0), jobs)
        _tidy(tidy, n, ["count"] + mstat.name.split(","), vals)
        R = vals.shape[0]
        count = vals[:, 0]
        cz = mean_zscore(count - vol * n)
        incs = []
        for i in range(1, j + 1):
            dlt = vals[:, 1 + i] - vals[:, i]
            incs.append({"j": i, "mean": float(dlt.mean()),
                         "se": float(dlt.std(ddof=1) / math.sqrt(R)), "z": mean_zscore(dlt)})
        m0 = float(np.abs(vals[:, 1] - vol * n).max())
        row_ok = abs(cz) <= z and all(abs(r["z"]) <= z for r in incs) and m0 < 1e-9 * max(n, 1)
        ok = ok and row_ok
        row = _moment_row(n, count, expected_mean=vol * n, z_mean=float(cz), increments=incs,
                          m0_error=m0, passed=bool(row_ok))
        report.per_n.append(row)
    report.verdicts["unbiased_and_martingale"] = bool(ok)
    return report


def _checks(cfg, jobs, fn, name):
    report = ExperimentReport(cfg.experiment, cfg.dim, cfg.beta, cfg.region, list(cfg.ns), seed=cfg.seed)
    ok = True
    for n in cfg.ns:
        rng = stream(cfg.seed, n, 2)
        results = fn(n, rng)
        for r in results:
            ok = ok and r.passed
            report.per_n.append({"n": n, **r.to_dict()})
    report.verdicts[name] = bool(ok)
    return report


def _microscopic(cfg, jobs, tidy):
    U0 = parse_region(cfg.options.get("unit_region", "unit" if cfg.region == "unit" else cfg.region), cfg.dim)
    lam = float(cfg.options.get("lam", 1.0))
    x = tuple(cfg.options.get("x", [0.5] * cfg.dim))
    report = ExperimentReport(cfg.experiment, cfg.dim, cfg.beta, str(U0), list(cfg.ns), seed=cfg.seed)
    regions = []
    for n in cfg.ns:
        V = blowup_region(x, lam, U0, n)
        regions.append(str(V))
        vals = _collect(_job(cfg, n, (CountStat(V),)), cfg, (n, 0), jobs)[:, 0]
        _tidy(tidy, n, ["count"], vals[:, None])
        report.per_n.append(_moment_row(n, vals, expected_mean=region_volume(V) * n, region=str(V)))
    fit = _fit(report.per_n)
    if fit is not None:
        report.slope, report.ci = fit.slope, fit.ci
    report.extra.update({"lam": lam, "x": list(x), "regions": regions})
    return report


def run_experiment(cfg: ExperimentConfig | dict, jobs: int = 1) -> tuple[ExperimentReport, list]:
    """Run one named experiment; returns the report and tidy ``(n, replicate, statistic, value)`` rows."""
    if isinstance(cfg, dict):
        cfg = ExperimentConfig.from_dict(cfg)
    cfg.validate()
    t0 = time.perf_counter()
    U = parse_region(cfg.region, cfg.dim)
    tidy: list = []
    name = cfg.experiment
    if name == "variance-scaling":
        report = _variance_scaling(cfg, U, jobs, tidy)
    elif name == "linear-stats":
        report = _linear_stats(cfg, U, jobs, tidy)
    elif name == "martingale":
        report = _martingale(cfg, U, jobs, tidy)
    elif name == "microscopic":
        report = _microscopic(cfg, jobs, tidy)
    else:
        table = shared_table(cfg.dim, cfg.beta, max(max(cfg.ns), 2))
        R = cfg.replicates
        if name == "conditional":
            k = int(cfg.options.get("k", 1))
            report = _checks(cfg, jobs, lambda n, rng: [
                conditional_mean_check(cfg.dim, n, cfg.beta, k, R, rng, table),
                independence_check(cfg.dim, n, cfg.beta, R, rng, table)], "conditional")
        elif name == "repulsion":
            j = int(cfg.options.get("j", 4))
            report = _checks(cfg, jobs, lambda n, rng: [
                repulsion_check(cfg.dim, n, cfg.beta, j, R, rng, table)], "repulsion")
        else:
            c1 = float(cfg.options.get("c1", 0.1))
            target: Any = _linear_function(cfg) if "coeffs" in cfg.options else U
            report = _checks(cfg, jobs, lambda n, rng: [
                anticoncentration_check(cfg.dim, n, cfg.beta, target, c1, R, rng, table)],
                "anticoncentration")
    report.runtime = time.perf_counter() - t0
    report.extra["config"] = cfg.to_dict()
    return report, tidy
