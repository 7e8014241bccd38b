"""Dyadic-tree geometry of the unit cube, the hierarchical potential, and regions.

Coordinates are fixed-point fractions: an integer ``c`` in ``[0, 2**BITS)``
stands for ``c / 2**BITS``. With ``BITS = 53`` the conversion to and from
``float`` is lossless, and cube membership is decided on integers, so every
dyadic cube is exactly half-open.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence, Union

import numpy as np
from scipy import integrate

BITS = 53
SCALE = float(2**BITS)
INFINITE = math.inf
DIMS = (1, 2, 3)


class GeometryError(ValueError):
    pass


class ResolutionError(GeometryError):
    """A dyadic level beyond the fixed-point resolution was requested."""


def _check_dim(d: int) -> int:
    if d not in DIMS:
        raise GeometryError(f"dimension must be 1, 2 or 3, got {d}")
    return d


# --------------------------------------------------------------------------
# points and configurations
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Point:
    coords: tuple[int, ...]

    def __post_init__(self):
        _check_dim(len(self.coords))
        for c in self.coords:
            if not 0 <= c < 2**BITS:
                raise GeometryError(f"coordinate {c} outside [0, 2^{BITS})")

    @classmethod
    def from_floats(cls, xs: Iterable[float]) -> "Point":
        ints = []
        for x in xs:
            x = float(x)
            if not 0.0 <= x < 1.0:
                raise GeometryError(f"coordinate {x} outside [0, 1)")
            ints.append(int(x * SCALE))
        return cls(tuple(ints))

    @property
    def dim(self) -> int:
        return len(self.coords)

    def to_floats(self) -> tuple[float, ...]:
        return tuple(c / SCALE for c in self.coords)


def to_fixed(xs) -> np.ndarray:
    """Float coordinates in [0, 1) to an int64 fixed-point array."""
    arr = np.asarray(xs, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr >= 1.0):
        raise GeometryError("coordinates must lie in [0, 1)")
    # scaling by a power of two is exact; the truncation drops bits below 2^-53
    return np.floor(arr * SCALE).astype(np.int64)


def to_float(points: np.ndarray) -> np.ndarray:
    return np.asarray(points, dtype=np.int64).astype(np.float64) / SCALE


@dataclass
class Configuration:
    """``n`` points of ``[0, 1)^dim`` (an ``(n, dim)`` int64 array) at inverse temperature ``beta``."""

    dim: int
    beta: float
    points: np.ndarray = field(repr=False)

    def __post_init__(self):
        _check_dim(self.dim)
        pts = np.asarray(self.points, dtype=np.int64).reshape(-1, self.dim)
        if pts.size and (pts.min() < 0 or pts.max() >= 2**BITS):
            raise GeometryError("fixed-point coordinates out of range")
        self.points = pts

    @classmethod
    def from_points(cls, points: Sequence[Point], beta: float) -> "Configuration":
        if not points:
            raise GeometryError("dimension of an empty point list is ambiguous")
        dim = points[0].dim
        if any(p.dim != dim for p in points):
            raise GeometryError("mixed dimensions")
        return cls(dim, beta, np.array([p.coords for p in points], dtype=np.int64))

    @classmethod
    def from_floats(cls, xs, beta: float, dim: int | None = None) -> "Configuration":
        arr = np.asarray(xs, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(-1, dim or 1)
        return cls(arr.shape[1], beta, to_fixed(arr))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def point(self, i: int) -> Point:
        return Point(tuple(int(c) for c in self.points[i]))

    def as_floats(self) -> np.ndarray:
        return to_float(self.points)

    def replace(self, i: int, y: Point) -> "Configuration":
        pts = self.points.copy()
        pts[i] = y.coords
        return Configuration(self.dim, self.beta, pts)


# --------------------------------------------------------------------------
# separation level and potential
# --------------------------------------------------------------------------

def separation_level(x: Point, y: Point) -> int | float:
    """Smallest ``k`` with ``x`` and ``y`` in distinct level-``k`` cubes, or ``INFINITE`` if ``x == y``."""
    if x.dim != y.dim:
        raise GeometryError(f"dimension mismatch: {x.dim} vs {y.dim}")
    best = INFINITE
    for a, b in zip(x.coords, y.coords):
        diff = a ^ b
        if diff:
            best = min(best, 1 + BITS - diff.bit_length())
    return best


def separation_levels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise separation levels of two broadcastable ``(..., d)`` fixed-point arrays (float, ``inf`` on ties)."""
    diff = np.bitwise_xor(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64))
    # xor < 2^53 is exact in float64, so frexp's exponent is the bit length
    _, bitlen = np.frexp(diff.astype(np.float64))
    level = np.where(diff == 0, np.inf, 1.0 + BITS - bitlen)
    return level.min(axis=-1)


def potential_from_level(level, dim: int):
    """``2**level`` in 3D and ``level`` in 1D/2D; ``inf`` stays ``inf``."""
    if dim == 3:
        return np.exp2(level)
    return level * 1.0


def potential(x: Point, y: Point) -> float:
    k = separation_level(x, y)
    if k == INFINITE:
        return INFINITE
    return float(2**k) if x.dim == 3 else float(k)


def min_potential(dim: int) -> float:
    return 2.0 if _check_dim(dim) == 3 else 1.0


def potential_mean(dim: int) -> float:
    """Average of ``potential(x, Y)`` over uniform ``Y``; the same for every ``x``."""
    _check_dim(dim)
    if dim == 3:
        return 7.0 / 3.0
    return 2.0**dim / (2.0**dim - 1.0)


# --------------------------------------------------------------------------
# dyadic cubes
# --------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class DyadicCube:
    level: int
    index: tuple[int, ...]

    def __post_init__(self):
        _check_dim(len(self.index))
        if not 0 <= self.level <= BITS:
            raise ResolutionError(f"level {self.level} outside [0, {BITS}]")
        side = 1 << self.level
        if any(not 0 <= i < side for i in self.index):
            raise GeometryError(f"index {self.index} invalid at level {self.level}")

    @classmethod
    def unit(cls, dim: int) -> "DyadicCube":
        return cls(0, (0,) * _check_dim(dim))

    @property
    def dim(self) -> int:
        return len(self.index)

    @property
    def side(self) -> float:
        return 2.0 ** (-self.level)

    @property
    def volume(self) -> float:
        return 2.0 ** (-self.level * self.dim)

    @property
    def lo(self) -> tuple[float, ...]:
        return tuple(i * self.side for i in self.index)

    @property
    def hi(self) -> tuple[float, ...]:
        return tuple((i + 1) * self.side for i in self.index)

    def parent(self) -> "DyadicCube":
        if self.level == 0:
            raise GeometryError("the unit cube has no parent")
        return DyadicCube(self.level - 1, tuple(i >> 1 for i in self.index))

    def children(self) -> list["DyadicCube"]:
        return children(self)

    def contains(self, x: Point) -> bool:
        return cube_of(x, self.level) == self


def cube_of(x: Point, k: int) -> DyadicCube:
    if not 0 <= k <= BITS:
        raise ResolutionError(f"level {k} exceeds resolution {BITS}")
    return DyadicCube(k, tuple(c >> (BITS - k) for c in x.coords))


def cube_indices(points: np.ndarray, k: int) -> np.ndarray:
    """Per-coordinate level-``k`` cube indices of an ``(n, d)`` fixed-point array."""
    if not 0 <= k <= BITS:
        raise ResolutionError(f"level {k} exceeds resolution {BITS}")
    return np.right_shift(np.asarray(points, dtype=np.int64), BITS - k)


def flat_cube_ids(points: np.ndarray, k: int) -> np.ndarray:
    """One int64 id per point naming its level-``k`` cube (requires ``d * k <= 62``)."""
    idx = cube_indices(points, k)
    d = idx.shape[1]
    if d * k > 62:
        raise ResolutionError(f"flat ids need d*k <= 62, got {d * k}")
    out = np.zeros(idx.shape[0], dtype=np.int64)
    for i in range(d):
        out |= idx[:, i] << (k * i)
    return out


def flat_id(cube: DyadicCube) -> int:
    out = 0
    for i, c in enumerate(cube.index):
        out |= c << (cube.level * i)
    return out


def children(cube: DyadicCube) -> list[DyadicCube]:
    """The ``2**d`` children in lexicographic order of index offsets."""
    if cube.level >= BITS:
        raise ResolutionError("children would exceed the fixed-point resolution")
    d = cube.dim
    out = []
    for offset in range(2**d):
        bits = [(offset >> (d - 1 - i)) & 1 for i in range(d)]
        out.append(DyadicCube(cube.level + 1, tuple(2 * c + b for c, b in zip(cube.index, bits))))
    return out


# --------------------------------------------------------------------------
# regions
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class UnitCube:
    dim: int

    def __post_init__(self):
        _check_dim(self.dim)

    def contains(self, xs: np.ndarray) -> np.ndarray:
        return np.ones(np.asarray(xs).shape[0], dtype=bool)

    def __str__(self):
        return "unit"


@dataclass(frozen=True)
class Box:
    """Half-open axis-aligned box ``[lo, hi)`` inside the unit cube."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if len(lo) != len(hi):
            raise GeometryError("lo and hi have different lengths")
        _check_dim(len(lo))
        for a, b in zip(lo, hi):
            if not 0.0 <= a < b <= 1.0:
                raise GeometryError(f"invalid box side [{a}, {b})")

    @property
    def dim(self) -> int:
        return len(self.lo)

    def contains(self, xs: np.ndarray) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        return np.all((xs >= np.array(self.lo)) & (xs < np.array(self.hi)), axis=1)

    def __str__(self):
        return "box:" + ",".join(repr(v) for v in self.lo + self.hi)


@dataclass(frozen=True)
class Ball:
    """Open ball, implicitly intersected with the unit cube."""

    center: tuple[float, ...]
    radius: float

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radius", float(self.radius))
        _check_dim(len(c))
        if not self.radius > 0:
            raise GeometryError("ball radius must be positive")
        if any(not 0.0 <= v <= 1.0 for v in c):
            raise GeometryError("ball center must lie in the closed unit cube")

    @property
    def dim(self) -> int:
        return len(self.center)

    def contains(self, xs: np.ndarray) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        return np.sum((xs - np.array(self.center)) ** 2, axis=1) < self.radius**2

    def __str__(self):
        return "ball:" + ",".join(repr(v) for v in self.center + (self.radius,))


Region = Union[UnitCube, Box, Ball]


def parse_region(text: str, dim: int) -> Region:
    """Parse ``unit``, ``box:lo1,..,lod,hi1,..,hid`` or ``ball:c1,..,cd,r``."""
    _check_dim(dim)
    text = text.strip()
    if text == "unit":
        return UnitCube(dim)
    kind, _, rest = text.partition(":")
    try:
        vals = [float(v) for v in rest.split(",")] if rest else []
    except ValueError as exc:
        raise GeometryError(f"bad number in region {text!r}") from exc
    if kind == "box":
        if len(vals) != 2 * dim:
            raise GeometryError(f"box needs {2 * dim} numbers in {dim}D")
        return Box(tuple(vals[:dim]), tuple(vals[dim:]))
    if kind == "ball":
        if len(vals) != dim + 1:
            raise GeometryError(f"ball needs {dim + 1} numbers in {dim}D")
        return Ball(tuple(vals[:dim]), vals[dim])
    raise GeometryError(f"unknown region {text!r}")


def region_dim(U: Region) -> int:
    return U.dim


def contains_points(U: Region, points: np.ndarray) -> np.ndarray:
    """Membership mask of fixed-point points (float conversion is exact)."""
    return U.contains(to_float(points))


# ---- volumes ---------------------------------------------------------------

def _interval_overlap(a0, a1, b0, b1) -> float:
    return max(0.0, min(a1, b1) - max(a0, b0))


def _semicircle_integral(u0: float, u1: float, r: float) -> float:
    """Integral of sqrt(r^2 - u^2) over [u0, u1] within [-r, r]."""

    def F(u):
        u = min(max(u, -r), r)
        return 0.5 * (u * math.sqrt(max(r * r - u * u, 0.0)) + r * r * math.asin(u / r))

    return F(u1) - F(u0)


def _clamp_integral(c: float, u0: float, u1: float, r: float) -> float:
    """Integral over u in [u0, u1] of clamp(c, -s(u), s(u)), s(u) = sqrt(r^2 - u^2)."""
    total_s = _semicircle_integral(u0, u1, r)
    if abs(c) >= r:
        return math.copysign(total_s, c)
    h = math.sqrt(r * r - c * c)
    a, b = max(u0, -h), min(u1, h)
    if b <= a:
        return math.copysign(total_s, c)
    inner_s = _semicircle_integral(a, b, r)
    return c * (b - a) + math.copysign(total_s - inner_s, c)


def _disk_rect_area(cx, cy, r, x0, x1, y0, y1) -> float:
    if r <= 0.0:
        return 0.0
    u0, u1 = max(x0 - cx, -r), min(x1 - cx, r)
    if u1 <= u0:
        return 0.0
    area = _clamp_integral(y1 - cy, u0, u1, r) - _clamp_integral(y0 - cy, u0, u1, r)
    return max(area, 0.0)


def ball_box_volume(center, radius, lo, hi, tol: float = 1e-13) -> float:
    """Lebesgue measure of ``Ball(center, radius) ∩ [lo, hi)``."""
    d = len(center)
    if d == 1:
        return _interval_overlap(center[0] - radius, center[0] + radius, lo[0], hi[0])
    if d == 2:
        return _disk_rect_area(center[0], center[1], radius, lo[0], hi[0], lo[1], hi[1])
    cx, cy, cz = center
    z0, z1 = max(lo[2], cz - radius), min(hi[2], cz + radius)
    if z1 <= z0:
        return 0.0

    def slice_area(z):
        rho = math.sqrt(max(radius * radius - (z - cz) ** 2, 0.0))
        return _disk_rect_area(cx, cy, rho, lo[0], hi[0], lo[1], hi[1])

    # slice area has kinks where the slice circle meets an edge line or corner
    dists = [abs(lo[0] - cx), abs(hi[0] - cx), abs(lo[1] - cy), abs(hi[1] - cy)]
    dists += [math.hypot(a - cx, b - cy) for a in (lo[0], hi[0]) for b in (lo[1], hi[1])]
    breaks = set()
    for dist in dists:
        if dist < radius:
            h = math.sqrt(radius * radius - dist * dist)
            for z in (cz - h, cz + h):
                if z0 < z < z1:
                    breaks.add(z)
    val, _ = integrate.quad(slice_area, z0, z1, points=sorted(breaks) or None,
                            epsabs=tol * max(z1 - z0, 1e-300), epsrel=1e-13, limit=200)
    return max(val, 0.0)


def region_volume(U: Region) -> float:
    if isinstance(U, UnitCube):
        return 1.0
    if isinstance(U, Box):
        return math.prod(b - a for a, b in zip(U.lo, U.hi))
    return ball_box_volume(U.center, U.radius, (0.0,) * U.dim, (1.0,) * U.dim)


def cube_region_volume(D: DyadicCube, U: Region, tol: float = 1e-13) -> float:
    """``Leb(D ∩ U)``."""
    if isinstance(U, UnitCube):
        return D.volume
    lo, hi = D.lo, D.hi
    if isinstance(U, Box):
        return math.prod(_interval_overlap(a0, a1, b0, b1)
                         for a0, a1, b0, b1 in zip(lo, hi, U.lo, U.hi))
    near = sum(max(a - c, 0.0, c - b) ** 2 for a, b, c in zip(lo, hi, U.center))
    if near >= U.radius**2:
        return 0.0
    far = sum(max(c - a, b - c) ** 2 for a, b, c in zip(lo, hi, U.center))
    if far <= U.radius**2:
        return D.volume
    return min(ball_box_volume(U.center, U.radius, lo, hi, tol), D.volume)


def cube_region_fraction(D: DyadicCube, U: Region, tol: float = 1e-12) -> float:
    """Proportion of ``D`` that belongs to ``U``."""
    if tol <= 0:
        raise GeometryError("tol must be positive")
    frac = cube_region_volume(D, U, tol * D.volume * 1e-2) / D.volume
    return min(max(frac, 0.0), 1.0)


# ---- cube classification -----------------------------------------------------

BALL_CLASSIFY_TOL = 1e-12


@dataclass(frozen=True)
class LevelClasses:
    """Per-level bookkeeping: cubes inside ``U`` with parent not inside, and boundary cubes with their fractions."""

    inside: tuple[DyadicCube, ...]
    boundary: tuple[DyadicCube, ...]
    fractions: tuple[float, ...]


@lru_cache(maxsize=64)
def classify_levels(U: Region, j: int) -> tuple[LevelClasses, ...]:
    """Classification of every level ``0..j``, descending only through boundary cubes."""
    if not 0 <= j <= BITS:
        raise ResolutionError(f"level {j} exceeds resolution {BITS}")
    dim = U.dim
    root = DyadicCube.unit(dim)
    if isinstance(U, UnitCube):
        first = LevelClasses((root,), (), ())
        return (first,) + (LevelClasses((), (), ()),) * j
    vol = region_volume(U)
    levels = [LevelClasses((), (root,), (vol,))]
    frontier = [root]
    for _ in range(j):
        inside, boundary, fracs = [], [], []
        for cube in frontier:
            for child in children(cube):
                p = cube_region_fraction(child, U)
                tol = BALL_CLASSIFY_TOL if isinstance(U, Ball) else 0.0
                if p >= 1.0 - tol:
                    inside.append(child)
                elif p > tol:
                    boundary.append(child)
                    fracs.append(p)
        levels.append(LevelClasses(tuple(inside), tuple(boundary), tuple(fracs)))
        frontier = boundary
    return tuple(levels)


def classify_cubes(U: Region, j: int) -> tuple[list[DyadicCube], list[DyadicCube]]:
    """Level-``j`` cubes contained in ``U`` whose parent is not, and level-``j`` cubes meeting both ``U`` and its complement."""
    lv = classify_levels(U, j)[j]
    return list(lv.inside), list(lv.boundary)


# ---- blow-up -------------------------------------------------------------------

def blowup_region(x: Point | Sequence[float], lam: float, U: Region, n: int) -> Region:
    """Image ``n**(-1/d) * lam * U + x`` of a unit-scale region around ``x``."""
    xs = x.to_floats() if isinstance(x, Point) else tuple(float(v) for v in x)
    d = len(xs)
    if lam <= 0 or n < 1:
        raise GeometryError("need lam > 0 and n >= 1")
    if U.dim != d:
        raise GeometryError("region and point dimensions differ")
    s = lam * n ** (-1.0 / d)
    eps = 1e-12
    if isinstance(U, (UnitCube, Box)):
        lo = (0.0,) * d if isinstance(U, UnitCube) else U.lo
        hi = (1.0,) * d if isinstance(U, UnitCube) else U.hi
        new_lo = [xi + s * a for xi, a in zip(xs, lo)]
        new_hi = [xi + s * b for xi, b in zip(xs, hi)]
        if min(new_lo) < -eps or max(new_hi) > 1.0 + eps:
            raise GeometryError("blown-up region escapes the unit cube")
        new_lo = [min(max(v, 0.0), 1.0) for v in new_lo]
        new_hi = [min(max(v, 0.0), 1.0) for v in new_hi]
        if all(a == 0.0 for a in new_lo) and all(b == 1.0 for b in new_hi):
            return UnitCube(d)
        return Box(tuple(new_lo), tuple(new_hi))
    c = [xi + s * ci for xi, ci in zip(xs, U.center)]
    r = s * U.radius
    if any(ci - r < -eps or ci + r > 1.0 + eps for ci in c):
        raise GeometryError("blown-up region escapes the unit cube")
    return Ball(tuple(c), r)
