"""Hamiltonian evaluation and a simulated-annealing probe of the minimum energy."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .geometry import (
    BITS,
    INFINITE,
    Configuration,
    GeometryError,
    Point,
    min_potential,
    potential_from_level,
    separation_levels,
)


def energy_naive(c: Configuration) -> float:
    """Sum of pair potentials by an explicit O(n^2) loop over pairs."""
    pts = c.points
    total = 0.0
    for i in range(c.n - 1):
        levels = separation_levels(pts[i + 1:], pts[i])
        if np.isinf(levels).any():
            return INFINITE
        total += float(np.sum(potential_from_level(levels, c.dim)))
    return total


def morton_order(points: np.ndarray) -> np.ndarray:
    """Permutation sorting fixed-point points along the bit-interleaved (Z-order) key.

    The key has ``d * BITS`` bits; it is packed into 64-bit words and sorted
    lexicographically, so that every dyadic cube occupies a contiguous run.
    """
    pts = np.asarray(points, dtype=np.int64)
    n, d = pts.shape
    nwords = -(-d * BITS // 63)
    words = np.zeros((nwords, n), dtype=np.int64)
    for b in range(BITS):
        for i in range(d):
            pos = b * d + i
            bit = (pts[:, i] >> (BITS - 1 - b)) & 1
            words[pos // 63] |= bit << (62 - pos % 63)
    # lexsort treats its last key as primary
    return np.lexsort(words[::-1])


def energy_fast(c: Configuration) -> float:
    """Energy from per-cube pair counts along the dyadic tree.

    Uses ``H = w1 * C(n,2) + sum_{j>=1} sum_{D in level j} f_j * C(n_D, 2)`` with
    ``f_j = 2**j`` (3D) or ``1`` (1D/2D); after a Z-order sort each cube is a
    contiguous run, and the run structure at level ``j`` is read off from the
    separation levels of consecutive points.
    """
    n = c.n
    if n <= 1:
        return 0.0
    pts = c.points[morton_order(c.points)]
    seps = separation_levels(pts[1:], pts[:-1])
    if np.isinf(seps).any():
        return INFINITE
    total = min_potential(c.dim) * (n * (n - 1) // 2)
    deepest = int(seps.max())
    for j in range(1, deepest):
        # consecutive points sit in the same level-j cube iff they separate below j
        breaks = np.flatnonzero(seps <= j)
        edges = np.concatenate(([0], breaks + 1, [n]))
        sizes = np.diff(edges)
        pairs = int(np.sum(sizes * (sizes - 1) // 2))
        if pairs == 0:
            break
        total += (2.0**j if c.dim == 3 else 1.0) * pairs
    return total


def energy_delta(c: Configuration, i: int, y: Point) -> float:
    """``H(c with x_i -> y) - H(c)`` in O(n)."""
    if not 0 <= i < c.n:
        raise IndexError(i)
    if y.dim != c.dim:
        raise GeometryError("dimension mismatch")
    others = np.delete(c.points, i, axis=0)
    if others.shape[0] == 0:
        return 0.0
    ynew = np.array(y.coords, dtype=np.int64)
    if np.array_equal(ynew, c.points[i]):
        return 0.0
    new_levels = separation_levels(others, ynew)
    if np.isinf(new_levels).any():
        return INFINITE
    old_levels = separation_levels(others, c.points[i])
    if np.isinf(old_levels).any():
        return -INFINITE
    new = potential_from_level(new_levels, c.dim)
    old = potential_from_level(old_levels, c.dim)
    return float(np.sum(new) - np.sum(old))


def default_schedule() -> list[tuple[float, int]]:
    return [(0.25 * 2.0**s, 20_000) for s in range(9)]


def anneal_min_energy(d: int, n: int, schedule: Sequence[tuple[float, int]] | None,
                      rng: np.random.Generator) -> tuple[Configuration, float]:
    """Metropolis annealing over an increasing-β schedule; returns the best configuration seen.

    The result is an upper estimate of the minimum energy over ``n``-point
    configurations.
    """
    from .samplers import metropolis_run

    if n < 2:
        raise ValueError("annealing needs n >= 2")
    schedule = default_schedule() if schedule is None else list(schedule)
    pts = rng.integers(0, 2**BITS, size=(n, d), dtype=np.int64)
    best_pts = pts.copy()
    best = energy_fast(Configuration(d, 1.0, pts))
    for beta, steps in schedule:
        pts, stage_best, stage_pts, _ = metropolis_run(
            pts, d, beta, steps, rng, local_move_prob=0.5, local_level_mean=2.0,
            track_best=True)
        if stage_best < best:
            best, best_pts = stage_best, stage_pts
    conf = Configuration(d, schedule[-1][0] if schedule else 1.0, best_pts)
    return conf, energy_fast(conf)


def energy_bounds(d: int, n: int) -> tuple[float, float]:
    """Constant-free bracket ``w_min * C(n,2) <= L_n <= mean_w * C(n,2)``."""
    from .geometry import potential_mean

    pairs = math.comb(n, 2)
    return min_potential(d) * pairs, potential_mean(d) * pairs
