"""Exact top-down sampler, Metropolis chain, and i.i.d. baseline.

Every sampler draws from a ``numpy.random.Generator``; :func:`stream` derives
independent Philox streams from ``(seed, job index)`` so replicate batches
are reproducible regardless of how they are scheduled.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .geometry import BITS, Configuration, ResolutionError, _check_dim
from .energy import energy_fast
from .partition import LogZTable, PartitionError, build_logz_table, log_convolve


def stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for job ``key`` under ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


class _Uniforms:
    """Buffered uniforms so that the tree walk does not call into numpy per draw."""

    def __init__(self, rng: np.random.Generator, block: int = 1024):
        self.rng = rng
        self.block = block
        self.buf: list[float] = []
        self.pos = 0

    def __call__(self) -> float:
        if self.pos >= len(self.buf):
            self.buf = self.rng.random(self.block).tolist()
            self.pos = 0
        u = self.buf[self.pos]
        self.pos += 1
        return u


# --------------------------------------------------------------------------
# count splits
# --------------------------------------------------------------------------

@dataclass
class SplitDistribution:
    """Law of the children's counts for a cube holding ``n`` points at ``level``.

    ``suffix[r, t]`` is the log of the ``r``-fold convolution of ``exp(u)`` at
    total ``t``; child ``j`` (with ``r`` children after it) takes ``c`` points
    with probability proportional to ``exp(u[c] + suffix[r, T - c])``.
    """

    dim: int
    n: int
    level: int
    u: np.ndarray
    suffix: np.ndarray
    _cdfs: dict = field(default_factory=dict, repr=False)

    @property
    def children(self) -> int:
        return 2**self.dim

    def cdf(self, r: int, total: int) -> list[float]:
        key = (r, total)
        out = self._cdfs.get(key)
        if out is None:
            c = np.arange(total + 1)
            logits = self.u[c] + self.suffix[r, total - c]
            p = np.exp(logits - logits.max())
            cum = np.cumsum(p)
            out = (cum / cum[-1]).tolist()
            self._cdfs[key] = out
        return out

    def log_prob(self, counts) -> float:
        """Normalized log-probability of a full composition."""
        counts = list(counts)
        if sum(counts) != self.n or len(counts) != self.children:
            return -math.inf
        return float(sum(self.u[c] for c in counts) - self.suffix[self.children, self.n])


def _level_split(table: LogZTable, level: int) -> SplitDistribution:
    key = level if table.dim == 3 else 0
    dist = table._splits.get(key)
    if dist is None:
        u = table.split_weights(level)
        q = 2**table.dim
        suffix = np.full((q + 1, table.n_max + 1), -np.inf)
        suffix[0, 0] = 0.0
        acc = u.copy()
        suffix[1] = acc
        for r in range(2, q + 1):
            acc, _ = log_convolve(acc, u)
            suffix[r] = acc
        dist = SplitDistribution(table.dim, table.n_max, level, u, suffix)
        table._splits[key] = dist
    return dist


def split_distribution(table: LogZTable, n: int, level: int = 0) -> SplitDistribution:
    if not 0 <= n <= table.n_max:
        raise PartitionError(f"n={n} outside table range 0..{table.n_max}")
    if table.dim == 3 and level + 1 >= table.levels:
        raise PartitionError(f"level {level} needs child level {level + 1} beyond the table")
    base = _level_split(table, level)
    return SplitDistribution(base.dim, n, level, base.u, base.suffix, base._cdfs)


def _draw_counts(dist: SplitDistribution, total: int, uniform) -> list[int]:
    q = dist.children
    counts = []
    for j in range(q - 1):
        if total == 0:
            counts.append(0)
            continue
        cdf = dist.cdf(q - 1 - j, total)
        c = bisect.bisect_right(cdf, uniform())
        c = min(c, total)
        counts.append(c)
        total -= c
    counts.append(total)
    return counts


def sample_split(dist: SplitDistribution, rng: np.random.Generator) -> list[int]:
    """One composition ``(n_1, ..., n_{2^d})`` summing to ``dist.n``."""
    return _draw_counts(dist, dist.n, _Uniforms(rng, 16))


# --------------------------------------------------------------------------
# exact sampler
# --------------------------------------------------------------------------

@dataclass
class ExactStats:
    nodes: int = 0
    fallbacks: int = 0
    max_level: int = 0


def _child_offsets(d: int) -> list[tuple[int, ...]]:
    return [tuple((o >> (d - 1 - i)) & 1 for i in range(d)) for o in range(2**d)]


def _rejection_in_cube(d: int, m: int, beta_eff: float, level: int, rng,
                       max_tries: int = 1_000_000) -> np.ndarray:
    """``m`` points of the rescaled cube law by rejection from uniforms (3D level-cap fallback)."""
    shift = level
    for _ in range(max_tries):
        raw = rng.integers(0, 2**BITS, size=(m, d), dtype=np.int64)
        local = (raw >> shift) << shift
        h = energy_fast(Configuration(d, beta_eff, local))
        excess = h - 2.0 * math.comb(m, 2)
        if math.isfinite(h) and rng.random() < math.exp(-beta_eff * excess):
            return raw >> shift
    raise ResolutionError("rejection fallback did not accept")


def sample_exact(d: int, n: int, beta: float, table: LogZTable | None,
                 rng: np.random.Generator, stats: ExactStats | None = None) -> Configuration:
    """Exact draw from the Gibbs measure by recursive count splitting."""
    _check_dim(d)
    if table is None:
        table = build_logz_table(d, beta, max(n, 1))
    if table.dim != d or table.beta != beta:
        raise PartitionError("table does not match (d, beta)")
    if n > table.n_max:
        raise PartitionError(f"n={n} exceeds table n_max={table.n_max}")
    stats = stats if stats is not None else ExactStats()
    uniform = _Uniforms(rng)
    offsets = _child_offsets(d)
    certified = table.certified_levels() if d == 3 else None
    leaves: list[tuple[int, tuple[int, ...]]] = []
    blocks: list[np.ndarray] = []
    stack = [(0, (0,) * d, n)] if n > 0 else []
    while stack:
        level, index, m = stack.pop()
        if m == 1:
            leaves.append((level, index))
            continue
        if level >= BITS:
            raise ResolutionError(f"{m} points still share a cube at level {BITS}")
        stats.nodes += 1
        stats.max_level = max(stats.max_level, level)
        if d == 3 and level + 1 >= certified:
            stats.fallbacks += 1
            local = _rejection_in_cube(d, m, table.beta_at(level), level, rng)
            base = np.array(index, dtype=np.int64) << (BITS - level)
            blocks.append(base + local)
            continue
        dist = _level_split(table, level)
        counts = _draw_counts(dist, m, uniform)
        for off, c in zip(offsets, counts):
            if c:
                stack.append((level + 1, tuple(2 * i + b for i, b in zip(index, off)), c))
    pts = np.empty((0, d), dtype=np.int64)
    if leaves:
        lv = np.array([l for l, _ in leaves], dtype=np.int64)
        idx = np.array([ix for _, ix in leaves], dtype=np.int64).reshape(-1, d)
        span = np.left_shift(np.int64(1), BITS - lv)
        low = rng.integers(0, span[:, None], size=(len(leaves), d), dtype=np.int64)
        pts = (idx << (BITS - lv)[:, None]) + low
    if blocks:
        pts = np.vstack([pts] + blocks)
    pts = pts[rng.permutation(pts.shape[0])]
    return Configuration(d, beta, pts)


def sample_iid(d: int, n: int, rng: np.random.Generator, beta: float = 0.0) -> Configuration:
    _check_dim(d)
    return Configuration(d, beta, rng.integers(0, 2**BITS, size=(n, d), dtype=np.int64))


# --------------------------------------------------------------------------
# Metropolis chain
# --------------------------------------------------------------------------

@dataclass
class McmcParams:
    steps: int
    burn_in: int
    thin: int = 1
    local_move_prob: float = 0.5
    local_level_mean: float = 2.0

    def __post_init__(self):
        if not self.steps > self.burn_in >= 0:
            raise ValueError("need steps > burn_in >= 0")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if not 0.0 <= self.local_move_prob <= 1.0:
            raise ValueError("local_move_prob must lie in [0, 1]")
        if self.local_level_mean < 1.0:
            raise ValueError("local_level_mean must be >= 1")

    @classmethod
    def defaults(cls, n: int, beta: float, samples: int = 1) -> "McmcParams":
        burn = int(50 * max(n, 1) * (1 + beta))
        thin = max(n, 1)
        return cls(steps=burn + thin * samples, burn_in=burn, thin=thin)


@njit(cache=True)
def _pair_w(a, b, d, three):
    lev = 1 << 30
    for c in range(d):
        x = a[c] ^ b[c]
        if x != 0:
            e = math.frexp(float(x))[1]
            k = 1 + 53 - e
            if k < lev:
                lev = k
    if lev == 1 << 30:
        return np.inf
    if three:
        return 2.0**lev
    return float(lev)


@njit(cache=True)
def _mh_kernel(pts, beta, pick, is_local, levels, raw, acc_u, H, three,
               step0, burn_in, thin, out, out_h, n_out, track_best, best_pts, best_h):
    n, d = pts.shape
    accepted = 0
    y = np.empty(d, dtype=np.int64)
    steps = pick.shape[0]
    for t in range(steps):
        i = pick[t]
        if is_local[t]:
            sh = 53 - levels[t]
            for c in range(d):
                hi_bits = (pts[i, c] >> sh) << sh
                mask = (np.int64(1) << sh) - 1
                y[c] = hi_bits | (raw[t, c] & mask)
        else:
            for c in range(d):
                y[c] = raw[t, c]
        delta = 0.0
        clash = False
        for j in range(n):
            if j == i:
                continue
            wn = _pair_w(y, pts[j], d, three)
            if wn == np.inf:
                clash = True
                break
            delta += wn - _pair_w(pts[i], pts[j], d, three)
        if not clash and (delta <= 0.0 or acc_u[t] < np.exp(-beta * delta)):
            for c in range(d):
                pts[i, c] = y[c]
            H += delta
            accepted += 1
            if track_best and H < best_h[0]:
                best_h[0] = H
                best_pts[:, :] = pts
        s = step0 + t + 1
        if s > burn_in and (s - burn_in) % thin == 0 and n_out[0] < out.shape[0]:
            out[n_out[0]] = pts
            out_h[n_out[0]] = H
            n_out[0] += 1
    return H, accepted


def _chunk_randoms(rng, n, d, size, local_move_prob, local_level_mean):
    pick = rng.integers(0, n, size=size, dtype=np.int64)
    is_local = rng.random(size) < local_move_prob
    levels = np.minimum(rng.geometric(1.0 / local_level_mean, size=size), BITS).astype(np.int64)
    raw = rng.integers(0, 2**BITS, size=(size, d), dtype=np.int64)
    acc_u = rng.random(size)
    return pick, is_local, levels, raw, acc_u


def run_chain(pts: np.ndarray, d: int, beta: float, params: McmcParams,
              rng: np.random.Generator, record: bool = True, track_best: bool = False,
              chunk: int = 1 << 16) -> dict:
    """Run the Metropolis chain from ``pts`` (modified copy); returns states, energies, and counters."""
    pts = np.array(pts, dtype=np.int64, copy=True).reshape(-1, d)
    n = pts.shape[0]
    n_keep = (params.steps - params.burn_in) // params.thin if record else 0
    out = np.empty((n_keep, n, d), dtype=np.int64)
    out_h = np.empty(n_keep)
    n_out = np.zeros(1, dtype=np.int64)
    H = energy_fast(Configuration(d, beta, pts))
    best_pts = pts.copy()
    best_h = np.array([H])
    accepted = 0
    if n == 0:
        return {"points": pts, "samples": out[:0], "energies": out_h[:0], "H": 0.0,
                "accepted": 0, "steps": params.steps, "best_h": 0.0, "best_points": pts}
    done = 0
    three = d == 3
    while done < params.steps:
        size = min(chunk, params.steps - done)
        pick, is_local, levels, raw, acc_u = _chunk_randoms(
            rng, n, d, size, params.local_move_prob, params.local_level_mean)
        H, acc = _mh_kernel(pts, float(beta), pick, is_local, levels, raw, acc_u, float(H), three,
                            done, params.burn_in, params.thin, out, out_h, n_out,
                            track_best, best_pts, best_h)
        accepted += acc
        done += size
    k = int(n_out[0])
    return {"points": pts, "samples": out[:k], "energies": out_h[:k], "H": H,
            "accepted": accepted, "steps": params.steps, "best_h": float(best_h[0]),
            "best_points": best_pts}


def metropolis_run(pts, d, beta, steps, rng, local_move_prob=0.5, local_level_mean=2.0,
                   track_best=False):
    """Plain fixed-β stage used by the annealer: ``(final, best_energy, best_points, acceptance)``."""
    params = McmcParams(steps=steps, burn_in=0, thin=max(steps, 1),
                        local_move_prob=local_move_prob, local_level_mean=local_level_mean)
    res = run_chain(pts, d, beta, params, rng, record=False, track_best=track_best)
    return res["points"], res["best_h"], res["best_points"], res["accepted"] / max(steps, 1)


def integrated_autocorr_time(x: np.ndarray, c: float = 5.0) -> float:
    """Integrated autocorrelation time with Sokal's automatic window."""
    x = np.asarray(x, dtype=np.float64)
    m = x.size
    if m < 4 or np.var(x) == 0.0:
        return 1.0
    y = x - x.mean()
    size = 1 << int(math.ceil(math.log2(2 * m)))
    f = np.fft.rfft(y, size)
    acf = np.fft.irfft(f * np.conj(f), size)[:m]
    acf /= acf[0]
    tau = 1.0
    for w in range(1, m):
        tau = 1.0 + 2.0 * acf[1:w + 1].sum()
        if w >= c * tau:
            break
    return max(tau, 1.0)


def sample_mcmc(d: int, n: int, beta: float, params: McmcParams | None,
                rng: np.random.Generator, init: np.ndarray | None = None):
    """Final state of a Metropolis chain started from uniform points, plus diagnostics."""
    _check_dim(d)
    params = params or McmcParams.defaults(n, beta)
    start = rng.integers(0, 2**BITS, size=(n, d), dtype=np.int64) if init is None else init
    res = run_chain(start, d, beta, params, rng)
    energies = res["energies"]
    diag = {
        "acceptance_rate": res["accepted"] / params.steps,
        "tau_energy": integrated_autocorr_time(energies) if energies.size else float("nan"),
        "energy_mean": float(energies.mean()) if energies.size else float("nan"),
        "energy_std": float(energies.std()) if energies.size else float("nan"),
        "energy_min": float(energies.min()) if energies.size else float("nan"),
        "energy_max": float(energies.max()) if energies.size else float("nan"),
        "recorded": int(energies.size),
    }
    return Configuration(d, beta, res["points"]), diag


def mcmc_samples(d: int, n: int, beta: float, params: McmcParams, rng: np.random.Generator):
    """All thinned post-burn-in states of one chain, shape ``(k, n, d)``, and the chain record."""
    start = rng.integers(0, 2**BITS, size=(n, d), dtype=np.int64)
    res = run_chain(start, d, beta, params, rng)
    return res["samples"], res
