"""Certified log-space partition functions of the hierarchical gas.

Everything is stored in the normalized form

    log Z(n, b) = -c * b * C(n, 2) + r(n, b),      c = 2 (3D) or 1 (1D/2D),

where ``c`` is the smallest pair potential, so ``r <= 0`` is the log of the
mean of ``exp(-b * (H - c * C(n, 2)))`` under uniform points.  In this form
the child-composition recursion

    R(n, b) = sum over n_1 + ... + n_{2^d} = n of
              2^{-dn} n! prod_i exp(-c b C(n_i, 2)) R(n_i, b_child) / n_i!

has only non-positive exponents, so no cancellation between huge terms
occurs at deep levels (``b_child = 2b`` in 3D, ``b`` in 1D/2D).

Intervals are propagated with separate lower and upper chains and widened by
an a-priori rounding allowance after every log-sum-exp.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .geometry import _check_dim, min_potential, potential_mean

EPS = np.finfo(float).eps
MAX_N = 1024
DEFAULT_LEVEL_CAP = 40
CERT_WIDTH = 1e-10
RATIO_SLACK = 1e-9


class PartitionError(ValueError):
    pass


def _pairs(n):
    n = np.asarray(n, dtype=np.float64)
    return n * (n - 1.0) / 2.0


def _lse_rows(x: np.ndarray, delta: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise log-sum-exp with an error bound.

    ``delta`` bounds the error already present in each entry of ``x``; it is
    propagated as ``log sum_s w_s exp(delta_s)`` with ``w`` the normalized
    weights, so large errors on negligible terms cost nothing.  Rounding of
    the evaluation itself is added on top.
    """
    m = np.max(x, axis=1)
    finite = np.isfinite(m)
    msafe = np.where(finite, m, 0.0)
    with np.errstate(invalid="ignore"):
        shifted = x - msafe[:, None]
    w = np.exp(shifted)
    s = w.sum(axis=1)
    ssafe = np.where(finite, s, 1.0)
    out = np.where(finite, msafe + np.log(ssafe), -np.inf)
    wn = w / ssafe[:, None]
    absx = np.where(np.isfinite(x), np.abs(x), 0.0)
    abss = np.where(np.isfinite(shifted), np.abs(shifted), 0.0)
    spread = np.sum(wn * (absx + abss + 2.0), axis=1)
    err = 2.0 * EPS * (spread + np.abs(np.where(finite, out, 0.0)) + x.shape[1] + 1.0)
    if delta is not None:
        with np.errstate(divide="ignore", over="ignore"):
            logw = np.where(wn > 0, np.log(np.where(wn > 0, wn, 1.0)), -np.inf)
            z = logw + np.where(np.isfinite(x), delta, 0.0)
        zm = np.max(z, axis=1)
        zm = np.where(np.isfinite(zm), zm, 0.0)
        prop = zm + np.log(np.sum(np.exp(z - zm[:, None]), axis=1))
        err = err + np.maximum(prop, 0.0) * (1.0 + 4.0 * EPS)
    return out, np.where(finite, err, 0.0)


def log_convolve(a: np.ndarray, b: np.ndarray, a_err: np.ndarray | None = None,
                 b_err: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``c(t) = log sum_s exp(a(s) + b(t - s))`` for ``t = 0..len-1`` with an error bound."""
    n = len(a)
    t = np.arange(n)[:, None]
    s = np.arange(n)[None, :]
    idx = t - s
    valid = idx >= 0
    j = np.clip(idx, 0, None)
    x = np.where(valid, a[None, :] + b[j], -np.inf)
    delta = None
    if a_err is not None or b_err is not None:
        ae = np.zeros(n) if a_err is None else a_err
        be = np.zeros(n) if b_err is None else b_err
        delta = np.where(valid, ae[None, :] + be[j], 0.0)
    return _lse_rows(x, delta)


@dataclass
class LogZTable:
    """Certified intervals of ``r(n, beta * 2**k)`` (3D) or ``r(n, beta)`` (1D/2D)."""

    dim: int
    beta: float
    n_max: int
    level_cap: int
    r_lo: np.ndarray = field(repr=False)
    r_hi: np.ndarray = field(repr=False)
    width_tol: float = CERT_WIDTH
    _splits: dict = field(default_factory=dict, repr=False)

    @property
    def levels(self) -> int:
        return self.r_lo.shape[0]

    @property
    def pair_weight(self) -> float:
        return min_potential(self.dim)

    def beta_at(self, level: int) -> float:
        return self.beta * 2.0**level if self.dim == 3 else self.beta

    def _row(self, level: int) -> int:
        if self.dim != 3:
            return 0
        if not 0 <= level < self.levels:
            raise PartitionError(f"level {level} outside table range 0..{self.levels - 1}")
        return level

    def r_interval(self, n: int, level: int = 0) -> tuple[float, float]:
        if not 0 <= n <= self.n_max:
            raise PartitionError(f"n={n} outside table range 0..{self.n_max}")
        row = self._row(level)
        return float(self.r_lo[row, n]), float(self.r_hi[row, n])

    def widths(self) -> np.ndarray:
        """Relative widths ``(hi - lo) / max(1, |log Z|)`` per level and n."""
        width = self.r_hi - self.r_lo
        scale = np.ones_like(width)
        for row in range(self.levels):
            level = row if self.dim == 3 else 0
            mid = -self.pair_weight * self.beta_at(level) * _pairs(np.arange(self.n_max + 1))
            scale[row] = np.maximum(1.0, np.abs(mid + 0.5 * (self.r_lo[row] + self.r_hi[row])))
        return width / scale

    def certified_levels(self) -> int:
        """Number of leading levels whose entries all meet the width tolerance."""
        cached = self._splits.get("certified")
        if cached is None:
            ok = np.all(self.widths() <= self.width_tol, axis=1)
            bad = np.flatnonzero(~ok)
            cached = int(bad[0]) if bad.size else self.levels
            self._splits["certified"] = cached
        return cached

    def split_weights(self, level: int) -> np.ndarray:
        """Child weights ``u(m) = -c b C(m,2) + mid r(m, child) - log m!`` for a node at ``level``."""
        b = self.beta_at(level)
        child = self._row(level + 1) if self.dim == 3 else 0
        mid = 0.5 * (self.r_lo[child] + self.r_hi[child])
        m = np.arange(self.n_max + 1)
        return -self.pair_weight * b * _pairs(m) + mid - gammaln(m + 1.0)


def _bracket(dim: int, b: float, n: np.ndarray) -> np.ndarray:
    """Constant-free lower bound on ``r``: Jensen with the mean potential."""
    return -(potential_mean(dim) - min_potential(dim)) * b * _pairs(n)


def _nudge(lo, hi):
    return np.nextafter(lo, -np.inf), np.nextafter(hi, np.inf)


def _build_3d(beta: float, n_max: int, K: int):
    ns = np.arange(n_max + 1)
    logfact = gammaln(ns + 1.0)
    lo = np.zeros((K + 1, n_max + 1))
    hi = np.zeros((K + 1, n_max + 1))
    lo[K] = _bracket(3, beta * 2.0**K, ns)
    for k in range(K - 1, -1, -1):
        b = beta * 2.0**k
        tilt = -2.0 * b * _pairs(ns) - logfact
        rows = []
        for child in (lo[k + 1], hi[k + 1]):
            u = tilt + child
            u_err = 4.0 * EPS * (np.abs(tilt) + np.abs(child) + logfact)
            acc, err = u.copy(), u_err.copy()
            for _ in range(7):
                acc, err = log_convolve(acc, u, err, u_err)
            rows.append((acc, err))
        base = -3.0 * np.log(2.0) * ns + logfact
        base_err = 4.0 * EPS * (np.abs(base) + 1.0)
        new_lo = base + rows[0][0] - rows[0][1] - base_err
        new_hi = base + rows[1][0] + rows[1][1] + base_err
        new_lo, new_hi = _nudge(new_lo, new_hi)
        lo[k] = np.maximum(new_lo, _bracket(3, b, ns))
        hi[k] = np.minimum(new_hi, 0.0)
    lo[:, :2] = 0.0
    hi[:, :2] = 0.0
    return lo, hi


def _build_low(dim: int, beta: float, n_max: int):
    q = 2**dim
    ns = np.arange(n_max + 1)
    logfact = gammaln(ns + 1.0)
    tilt = -beta * _pairs(ns) - logfact
    chains = []
    for side in (0, 1):
        r = np.zeros(n_max + 1)
        u = np.full(n_max + 1, -np.inf)
        u[:2] = 0.0
        err_u = np.zeros(n_max + 1)
        # S[j][t]: log of the j-fold self-convolution of exp(u) at total t
        S = np.full((q + 1, n_max + 1), -np.inf)
        S[0, 0] = 0.0
        S_err = np.zeros((q + 1, n_max + 1))
        for j in range(1, q + 1):
            S[j, 0] = 0.0
            if n_max >= 1:
                S[j, 1] = math.log(j)
        for n in range(2, n_max + 1):
            excl = np.full(q + 1, -np.inf)
            excl_err = np.zeros(q + 1)
            for j in range(2, q + 1):
                # compositions of n over j children with no child holding all n
                s = np.arange(1, n)
                terms = np.append(u[s] + S[j - 1, n - s], excl[j - 1])
                deltas = np.append(err_u[s] + S_err[j - 1, n - s], excl_err[j - 1])
                val, e = _lse_rows(terms[None, :], deltas[None, :])
                excl[j] = val[0]
                excl_err[j] = e[0]
            self_coef = dim * (1 - n) * math.log(2.0) - beta * math.comb(n, 2)
            rhs = -dim * n * math.log(2.0) + logfact[n] + excl[q]
            rn = rhs - math.log1p(-math.exp(self_coef))
            rn_err = excl_err[q] + 8.0 * EPS * (abs(rhs) + abs(rn) + 1.0)
            rn = rn - rn_err if side == 0 else rn + rn_err
            r[n] = rn
            u[n] = tilt[n] + rn
            err_u[n] = 4.0 * EPS * (abs(tilt[n]) + abs(rn))
            for j in range(1, q + 1):
                full, e = _lse_rows(np.array([[excl[j], math.log(j) + u[n]]]),
                                    np.array([[excl_err[j], err_u[n]]]))
                S[j, n] = full[0]
                S_err[j, n] = e[0]
        chains.append(r)
    lo, hi = _nudge(chains[0], chains[1])
    lo = np.maximum(lo, _bracket(dim, beta, ns))
    hi = np.minimum(hi, 0.0)
    lo[:2] = hi[:2] = 0.0
    return lo[None, :], hi[None, :]


def build_logz_table(dim: int, beta: float, n_max: int, level_cap: int = DEFAULT_LEVEL_CAP,
                     width_tol: float = CERT_WIDTH, min_certified: int | None = None,
                     max_level_cap: int = 200) -> LogZTable:
    """Fill the table from the composition recursion.

    In 3D the top level is seeded with the constant-free bracket and filled
    downward; the cap is raised until at least ``min_certified`` leading
    levels (default: half the cap) meet ``width_tol``.
    """
    _check_dim(dim)
    if not beta > 0 or not math.isfinite(beta):
        raise PartitionError("beta must be positive and finite")
    if not 0 <= n_max <= MAX_N:
        raise PartitionError(f"n_max must lie in 0..{MAX_N}")
    if dim != 3:
        lo, hi = _build_low(dim, beta, n_max)
        return LogZTable(dim, beta, n_max, 0, lo, hi, width_tol)
    if level_cap < 1:
        raise PartitionError("level_cap must be >= 1 in 3D")
    K = level_cap
    need = max(1, K // 2) if min_certified is None else min_certified
    while True:
        lo, hi = _build_3d(beta, n_max, K)
        table = LogZTable(3, beta, n_max, K, lo, hi, width_tol)
        if table.certified_levels() >= need or K >= max_level_cap:
            return table
        K = min(2 * K, max_level_cap)


def logz(table: LogZTable, n: int, level: int = 0) -> tuple[float, float]:
    """Certified interval of ``log Z(n, beta * 2**level)`` (level ignored in 1D/2D)."""
    r_lo, r_hi = table.r_interval(n, level)
    if n <= 1:
        return 0.0, 0.0
    shift = -table.pair_weight * table.beta_at(level) * math.comb(n, 2)
    return float(np.nextafter(shift + r_lo, -np.inf)), float(np.nextafter(shift + r_hi, np.inf))


def z2_oracle(dim: int, beta: float, tail_tol: float = 1e-18) -> dict:
    """``Z(2, beta)`` by direct summation over separation levels.

    ``{"series": value}`` plus ``"closed_form"`` in 1D.
    """
    _check_dim(dim)
    if not beta > 0:
        raise PartitionError("beta must be positive")
    q = 2**dim
    terms = []
    k = 1
    while True:
        w = 2.0**k if dim == 3 else float(k)
        term = (q - 1) * q ** (-k) * math.exp(-beta * w)
        terms.append(term)
        w_next = 2.0 ** (k + 1) if dim == 3 else float(k + 1)
        # remaining terms are dominated by a geometric series with ratio 1/q
        tail = (q - 1) * q ** (-(k + 1)) * math.exp(-beta * w_next) / (1.0 - 1.0 / q)
        if tail < tail_tol * math.fsum(terms) or k > 200:
            break
        k += 1
    out = {"series": math.fsum(terms)}
    if dim == 1:
        h = math.exp(-beta) / 2.0
        out["closed_form"] = h / (1.0 - h)
    return out


def quadrature_z3_1d(beta: float, depth: int = 10, z2: float | None = None) -> float:
    """``Z(3, beta)`` in 1D by summing over a ``2**depth`` dyadic grid.

    Cell triples with distinct cells contribute exactly; a shared cell
    contributes the in-cell pair factor ``exp(-beta*depth) * Z(2, beta)``;
    the all-shared term refers back to ``Z(3)`` and is solved for.
    """
    m = 2**depth
    if z2 is None:
        z2 = z2_oracle(1, beta)["closed_form"]
    i = np.arange(m)
    diff = i[:, None] ^ i[None, :]
    _, bitlen = np.frexp(diff.astype(np.float64))
    level = np.where(diff == 0, 0, 1 + depth - bitlen).astype(np.float64)
    F = np.exp(-beta * level)
    diag = math.exp(-beta * depth) * z2
    np.fill_diagonal(F, diag)
    total = float(np.sum(F * (F @ F)))
    total -= m * diag**3
    self_coef = m * float(m) ** -3 * math.exp(-3.0 * beta * depth)
    return total * float(m) ** -3 / (1.0 - self_coef)


@dataclass
class RatioReport:
    dim: int
    beta: float
    margins: list[float]
    passed: bool
    slope: float

    def to_dict(self) -> dict:
        return {"dim": self.dim, "beta": self.beta, "slope": self.slope,
                "margins": self.margins, "passed": self.passed,
                "min_margin": min(self.margins) if self.margins else None}


def validate_ratio_lower_bounds(table: LogZTable, slack: float = RATIO_SLACK) -> RatioReport:
    """Check ``log Z(n+1) - log Z(n) >= -mean_w * beta * n`` on the certified intervals."""
    slope = potential_mean(table.dim) * table.beta
    margins = []
    for n in range(table.n_max):
        lo_next, _ = logz(table, n + 1)
        _, hi_cur = logz(table, n)
        margins.append((lo_next - hi_cur) + slope * n)
    passed = all(m >= -slack for m in margins)
    return RatioReport(table.dim, table.beta, margins, passed, slope)
