import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiercoulomb.geometry import (
    BITS,
    INFINITE,
    Ball,
    Box,
    DyadicCube,
    GeometryError,
    Point,
    ResolutionError,
    UnitCube,
    blowup_region,
    classify_cubes,
    classify_levels,
    cube_indices,
    cube_of,
    cube_region_fraction,
    cube_region_volume,
    parse_region,
    potential,
    potential_from_level,
    potential_mean,
    region_volume,
    separation_level,
    separation_levels,
)

P = Point.from_floats
unit_floats = st.floats(min_value=0.0, max_value=1.0, exclude_max=True, allow_nan=False)


def test_separation_level_examples():
    assert separation_level(P((0.1, 0.1, 0.1)), P((0.6, 0.1, 0.1))) == 1
    assert separation_level(P((0.1, 0.2, 0.3)), P((0.1, 0.2, 0.3))) == INFINITE
    assert separation_level(P((0.1, 0.2, 0.3)), P((0.3, 0.2, 0.3))) == 2


def test_separation_level_dimension_mismatch():
    with pytest.raises(GeometryError):
        separation_level(P((0.1,)), P((0.1, 0.2)))


def test_potential_examples():
    a, b = P((0.1, 0.1, 0.1)), P((0.6, 0.1, 0.1))
    assert potential(a, b) == 2.0
    assert potential_from_level(3, 2) == 3
    assert potential(a, a) == INFINITE
    assert potential(P((0.1,)), P((0.3,))) == 2


def test_potential_mean_values():
    assert potential_mean(3) == pytest.approx(7 / 3)
    assert potential_mean(2) == pytest.approx(4 / 3)
    assert potential_mean(1) == 2.0


def test_separation_level_matches_cube_of_on_random_pairs():
    rng = np.random.default_rng(5)
    for d in (1, 2, 3):
        x = rng.integers(0, 2**BITS, size=(1_000_000, d), dtype=np.int64)
        y = x.copy()
        # force many shared prefixes: copy x and flip one random bit per pair
        bit = rng.integers(0, BITS, size=x.shape[0])
        coord = rng.integers(0, d, size=x.shape[0])
        y[np.arange(x.shape[0]), coord] ^= np.left_shift(np.int64(1), bit)
        k = separation_levels(x, y).astype(np.int64)
        rows = np.arange(x.shape[0])
        same_before = np.all((x >> (BITS - (k - 1))[:, None]) == (y >> (BITS - (k - 1))[:, None]), axis=1)
        differ_at = np.any((x >> (BITS - k)[:, None]) != (y >> (BITS - k)[:, None]), axis=1)
        assert same_before.all() and differ_at.all(), rows[~(same_before & differ_at)][:5]


@pytest.mark.parametrize("d", [1, 2, 3])
def test_potential_mean_monte_carlo(d):
    rng = np.random.default_rng(100 + d)
    for _ in range(10):
        x = rng.integers(0, 2**BITS, size=d, dtype=np.int64)
        y = rng.integers(0, 2**BITS, size=(1_000_000, d), dtype=np.int64)
        w = potential_from_level(separation_levels(y, x), d)
        se = w.std() / math.sqrt(w.size)
        assert abs(w.mean() - potential_mean(d)) <= 4 * se


def test_cube_of_examples():
    assert cube_of(P((0.3, 0.7, 0.2)), 0) == DyadicCube.unit(3)
    assert cube_of(P((0.6, 0.1, 0.1)), 1).index == (1, 0, 0)
    assert cube_of(P((0.3,)), 2).index == (1,)
    with pytest.raises(ResolutionError):
        cube_of(P((0.3,)), BITS + 1)


def test_children_examples():
    kids = DyadicCube.unit(3).children()
    assert len(kids) == 8 and len(set(kids)) == 8
    assert [(c.lo, c.hi) for c in DyadicCube(1, (0,)).children()] == [((0.0,), (0.25,)), ((0.25,), (0.5,))]


@given(st.integers(1, 3), st.integers(0, 12), st.data())
def test_children_partition_parent(d, level, data):
    index = tuple(data.draw(st.integers(0, 2**level - 1)) for _ in range(d))
    D = DyadicCube(level, index)
    kids = D.children()
    assert len(kids) == 2**d
    assert all(k.parent() == D for k in kids)
    assert sum(k.volume for k in kids) == D.volume
    assert len({k.index for k in kids}) == 2**d


@given(st.lists(unit_floats, min_size=1, max_size=3))
def test_point_float_round_trip_is_lossless(xs):
    p = P(xs)
    assert Point.from_floats(p.to_floats()) == p
    assert all(abs(a - b) < 2.0**-52 for a, b in zip(p.to_floats(), xs))


def test_region_volume_examples():
    assert region_volume(Box((0, 0, 0), (0.5, 1, 1))) == 0.5
    assert region_volume(UnitCube(2)) == 1.0
    assert abs(region_volume(Ball((0.5, 0.5, 0.5), 0.25)) - 4 / 3 * math.pi * 0.25**3) < 1e-9


def test_region_volume_clipped_balls():
    # an eighth of a sphere at a corner, half a disk on an edge, a clipped interval
    assert abs(region_volume(Ball((0, 0, 0), 0.5)) - math.pi * 0.5**3 / 6) < 1e-9
    assert abs(region_volume(Ball((0.0, 0.5), 0.25)) - math.pi * 0.25**2 / 2) < 1e-12
    assert region_volume(Ball((0.9,), 0.3)) == pytest.approx(0.4)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.05, 0.8))
def test_ball_volume_against_monte_carlo_2d(cx, cy, r):
    U = Ball((cx, cy), r)
    rng = np.random.default_rng(0)
    xs = rng.random((200_000, 2))
    p = U.contains(xs).mean()
    se = math.sqrt(max(p * (1 - p), 1e-12) / xs.shape[0])
    assert abs(region_volume(U) - p) <= 5 * se + 1e-9


def test_cube_region_fraction_examples():
    U = Box((0.25,), (0.75,))
    assert cube_region_fraction(DyadicCube(1, (0,)), U, 1e-12) == 0.5
    assert cube_region_fraction(DyadicCube(2, (1,)), U, 1e-12) == 1.0
    assert cube_region_fraction(DyadicCube(2, (0,)), U, 1e-12) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.floats(0.1, 0.9), st.floats(0.05, 0.6), st.integers(0, 3), st.data())
def test_fraction_is_additive_under_subdivision(d, c, r, level, data):
    U = Ball((c,) * d, r)
    index = tuple(data.draw(st.integers(0, 2**level - 1)) for _ in range(d))
    D = DyadicCube(level, index)
    whole = cube_region_volume(D, U)
    parts = sum(cube_region_volume(k, U) for k in D.children())
    assert abs(whole - parts) <= 1e-10


def test_classify_examples():
    assert classify_cubes(UnitCube(3), 1) == ([], [])
    assert classify_levels(UnitCube(3), 1)[0].inside == (DyadicCube.unit(3),)
    U, V = classify_cubes(Box((0.0,), (0.5,)), 1)
    assert U == [DyadicCube(1, (0,))] and V == []
    U, V = classify_cubes(Box((0.0,), (0.3,)), 2)
    assert U == [DyadicCube(2, (0,))] and V == [DyadicCube(2, (1,))]


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.data())
def test_box_volume_decomposition(d, data):
    lo = tuple(data.draw(st.floats(0.0, 0.6)) for _ in range(d))
    hi = tuple(a + data.draw(st.floats(0.05, 1.0 - a)) for a in lo)
    U = Box(lo, tuple(min(h, 1.0) for h in hi))
    jmax = {1: 20, 2: 9, 3: 5}[d]
    levels = classify_levels(U, jmax)
    vol = region_volume(U)
    inside = 0.0
    for j, lv in enumerate(levels):
        assert not set(lv.inside) & set(lv.boundary)
        inside += sum(D.volume for D in lv.inside)
        partial = sum(p * D.volume for p, D in zip(lv.fractions, lv.boundary))
        assert math.isclose(inside + partial, vol, rel_tol=1e-12, abs_tol=1e-15)


def test_parse_region_grammar():
    assert parse_region("unit", 2) == UnitCube(2)
    assert parse_region("box:0,0,0.5,1", 2) == Box((0, 0), (0.5, 1))
    assert parse_region("ball:0.5,0.5,0.5,0.2", 3) == Ball((0.5, 0.5, 0.5), 0.2)
    for U in (Box((0.1, 0.2), (0.3, 0.9)), Ball((0.5, 0.25), 0.125)):
        assert parse_region(str(U), 2) == U
    for bad in ("box:0", "ball:1.5,0.2", "ball:0.5", "sphere:1", "box:0.5,0.2", "box:a,b"):
        with pytest.raises(GeometryError):
            parse_region(bad, 1)


def test_region_invariants():
    with pytest.raises(GeometryError):
        Box((0.5,), (0.5,))
    with pytest.raises(GeometryError):
        Box((0.0,), (1.5,))
    with pytest.raises(GeometryError):
        Ball((0.5,), 0.0)
    with pytest.raises(GeometryError):
        Ball((1.5,), 0.1)


def test_half_open_membership():
    pts = np.array([[0.5], [0.4999999999999999], [0.0]])
    assert list(Box((0.0,), (0.5,)).contains(pts)) == [False, True, True]
    assert cube_indices(np.array([[2**52]], dtype=np.int64), 1)[0, 0] == 1


def test_blowup_examples():
    n = 1000
    assert blowup_region((0.0, 0.0, 0.0), n ** (1 / 3), UnitCube(3), n) == UnitCube(3)
    V = blowup_region((0.5, 0.5, 0.5), 1.0, Ball((0, 0, 0), 1.0), n)
    assert V.center == (0.5, 0.5, 0.5) and V.radius == pytest.approx(0.1)
    U = Box((0.0, 0.0), (1.0, 0.5))
    V = blowup_region((0.3, 0.3), 2.0, U, 400)
    assert region_volume(V) == pytest.approx(2.0**2 * region_volume(U) / 400)
    with pytest.raises(GeometryError):
        blowup_region((0.95,), 1.0, Ball((0.0,), 1.0), 4)
