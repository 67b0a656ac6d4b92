import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kornforge.field import Grid, RegionMask
from kornforge.modification import Rect, RectangleSet, modify
from kornforge.multiscale import (
    BoundaryMeasure, SquareHierarchy, box_cells, build_pou, check_pou, classify,
    classify_bruteforce, gate_holds, heal, structure_check,
)
from kornforge.rigid import RigidMotion

from conftest import two_body


def _brute_h1(rects: RectangleSet, center, half):
    g = rects.grid
    total = 0.0
    for r in rects.rects:
        (x0, x1), (y0, y1) = r.bounds(g)
        for y in (y0, y1):
            if center[1] - half < y < center[1] + half:
                total += max(0.0, min(x1, center[0] + half) - max(x0, center[0] - half))
        for x in (x0, x1):
            if center[0] - half < x < center[0] + half:
                total += max(0.0, min(y1, center[1] + half) - max(y0, center[1] - half))
    return total


def test_hierarchy_levels_and_centers():
    g = Grid((0, 0), 1.0, 64)
    hier = SquareHierarchy(g, theta=0.25)
    assert [s for _, s in hier.levels] == [0.25, 0.0625]
    c = hier.centers(0.25)
    assert c.shape == (4, 4, 2)
    assert c[0, 0].tolist() == [-0.75, -0.75] and c[3, 2].tolist() == [0.75, 0.25]
    with pytest.raises(ValueError):
        SquareHierarchy(g, theta=0.3)
    with pytest.raises(ValueError):
        SquareHierarchy(g, theta=1.0)


def test_box_cells_clip_and_open_box():
    g = Grid((0, 0), 1.0, 8)
    si, sj = box_cells(g, (0.0, 0.0), 0.25)
    assert (si.start, si.stop, sj.start, sj.stop) == (3, 5, 3, 5)
    si, sj = box_cells(g, (-1.0, 1.0), 0.5)
    assert (si.start, si.stop, sj.start, sj.stop) == (0, 2, 6, 8)


rect_strategy = st.lists(
    st.tuples(st.integers(0, 14), st.integers(1, 6), st.integers(0, 14), st.integers(1, 6)),
    min_size=1, max_size=4,
)


@settings(max_examples=40, deadline=None)
@given(rect_strategy, st.integers(-8, 8), st.integers(-8, 8), st.integers(1, 12))
def test_boundary_measure_matches_bruteforce(specs, cx, cy, half_q):
    g = Grid((0, 0), 1.0, 16)
    rects = RectangleSet(g, tuple(Rect(i, min(i + w, 16), j, min(j + v, 16)) for i, w, j, v in specs))
    q = g.h / 4
    center = np.array([cx * q, cy * q])
    half = half_q * q
    got = BoundaryMeasure(rects).in_boxes(center[None, :], half)[0]
    assert got == pytest.approx(_brute_h1(rects, center, half), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(rect_strategy)
def test_classify_matches_bruteforce(specs):
    g = Grid((0, 0), 1.0, 16)
    rects = RectangleSet(g, tuple(Rect(i, min(i + w, 16), j, min(j + v, 16)) for i, w, j, v in specs))
    hier = SquareHierarchy(g, theta=0.5)
    led = classify(rects, hier, 1.0, 0.5, enforce_gate=False)
    ref = classify_bruteforce(rects, hier, 1.0, 0.5)
    for lv in led.levels:
        A, B = ref[lv.i]
        assert set(map(tuple, lv.A.tolist())) == A
        assert set(map(tuple, lv.B.tolist())) == B


def test_threshold_is_inclusive():
    # at s = 1/4 with theta = 1/2 the threshold is 1/64 = 2h; a corner cell of the
    # rectangle poking into the enlarged box contributes exactly 2h
    g = Grid((0, 0), 1.0, 256)
    h = g.h
    hier = SquareHierarchy(g, theta=0.5)
    k0 = int(round((0.0625 - h + 1) / h))
    hit = RectangleSet(g, (Rect(k0, k0 + 40, k0, k0 + 40),))
    miss = RectangleSet(g, (Rect(k0 + 1, k0 + 41, k0 + 1, k0 + 41),))
    assert BoundaryMeasure(hit).in_boxes(np.array([[-0.25, -0.25]]), 0.3125)[0] == pytest.approx(2 * h)
    A_hit = set(map(tuple, classify(hit, hier, 1.0, 0.5, False).level(2).A.tolist()))
    A_miss = set(map(tuple, classify(miss, hier, 1.0, 0.5, False).level(2).A.tolist()))
    assert (1, 1) in A_hit
    assert (1, 1) not in A_miss


def test_gate_and_infeasible_ledger():
    g = Grid((0, 0), 1.0, 1024)
    rects = RectangleSet(g, (Rect(510, 511, 510, 511),))
    d = rects.total_diameter
    assert gate_holds(rects, 0.25, 1.0, 1.0 - 24 * d / 0.25)
    assert not gate_holds(rects, 0.25, 1.0, 1.0 - 23 * d / 0.25)
    assert not gate_holds(rects, 0.25, 1.0, 0.0)
    led = classify(rects, SquareHierarchy(g, 0.25), 1.0, 0.9, enforce_gate=True)
    assert not led.feasible and "gate" in led.reason
    with pytest.raises(ValueError):
        heal(None, led, 1.5, 1.0)


def test_structure_properties_on_a_feasible_configuration():
    g = Grid((0, 0), 1.0, 1024)
    rects = RectangleSet(g, (Rect(520, 521, 500, 501), Rect(100, 101, 100, 101)))
    hier = SquareHierarchy(g, theta=0.25)
    led = classify(rects, hier, 1.0, 0.4, enforce_gate=True)
    assert led.feasible
    rep = structure_check(led)
    assert rep.small_sum and rep.empty_beyond and rep.coverage
    assert rep.details["uncovered_pieces"] == 0
    assert np.isfinite(rep.perimeter_const) and np.isfinite(rep.area_const)
    # the rectangle outside the inner square produces no B squares
    assert led.B_union()[100, 100] == False  # noqa: E712


@settings(max_examples=20, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 7), st.integers(0, 7)), min_size=1, max_size=10, unique=True),
       st.integers(0, 10_000))
def test_pou_sums_to_one_and_gradients_scale(idx, seed):
    s = 0.125
    centers = np.array([[-1 + s * (2 * a + 1), -1 + s * (2 * b + 1)] for a, b in idx])
    pou = build_pou(centers, s)
    pts = np.random.default_rng(seed).uniform(-1, 1, size=(400, 2))
    chk = check_pou(pou, pts)
    assert chk.sum_error <= 1e-12
    assert chk.max_multiplicity <= 4
    # smoothstep slope 3/2 over a ramp of width s/8 gives 12 for one bump
    assert chk.grad_const <= 16
    phi0, phis = pou.evaluate(pts)
    assert phi0.min() >= -1e-15 and phis.min() >= -1e-15


def test_pou_far_from_squares_is_background():
    pou = build_pou([[0.0, 0.0]], 0.1)
    phi0, phis = pou.evaluate(np.array([[0.5, 0.5], [0.0, 0.0]]))
    assert phi0[0] == 1.0 and phis[0, 0] == 0.0
    assert phis[0, 1] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        build_pou([[0.0, 0.0]], 0.1, width_factor=0.3)


def test_heal_is_local_and_tracks_products():
    g = Grid((0, 0), 1.0, 64)
    f = two_body(g, (-0.125, 0.125, -0.0625, 0.0625), RigidMotion(0.2, (0.05, 0)), RigidMotion(0, (0, 0)))
    res = modify(f)
    hier = SquareHierarchy(g, theta=0.25)
    led = classify(res.rects, hier, res.shrunk_mu, 0.5, enforce_gate=False)
    out = heal(res.modified, led, 1.5, 1.0)
    assert out.product_ok and out.max_product <= np.exp(1 / (1 - out.eta_blend))
    assert out.eta_blend == pytest.approx(0.25 ** (0.5 - 1.5 / 4))
    # corners away from every bump support keep their values exactly
    reach = np.zeros((64, 64), bool)
    for lv in led.levels:
        for p in lv.centers:
            si, sj = box_cells(g, p, lv.s * (1 + 0.125))
            reach[si, sj] = True
    assert reach.any()
    assert np.array_equal(out.healed.corners[~reach], res.modified.corners[~reach])
    assert out.exceptional.cells[reach].any()


def test_heal_without_bad_squares_is_identity():
    g = Grid((0, 0), 1.0, 32)
    f = two_body(g, (-0.125, 0.125, -0.125, 0.125), RigidMotion(0, (0, 0)), RigidMotion(0, (0, 0)))
    res = modify(f)
    led = classify(RectangleSet(g, ()), SquareHierarchy(g, 0.25), 1.0, 0.5, enforce_gate=False)
    out = heal(res.modified, led, 1.5, 1.0)
    assert out.healed is res.modified
    assert out.exceptional.area == 0
    assert isinstance(out.exceptional, RegionMask)
