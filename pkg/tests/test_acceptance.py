"""Acceptance suite: one test per criterion, each reporting one PASS/FAIL line.

Lines are collected by the ``acceptance`` fixture and repeated in the terminal
summary so they stay visible under ``pytest -v``.
"""

import time

import numpy as np
import pytest

from kornforge.boundary import LipschitzGraphDomain, boundary_bad_squares, john_verify, whitney_cover
from kornforge.field import CrackSet, Grid, RegionMask, build_field, linear_sampler, lp_norm, strain
from kornforge.local import LocalConfig, inner_half_width, internal_exponent, local_estimate
from kornforge.modification import Rect, RectangleSet, jump_control_check, modify
from kornforge.multiscale import (
    SquareHierarchy, build_pou, check_pou, classify, gate_holds, heal, structure_check,
)
from kornforge.rigid import RigidMotion, affine_compare_constant, affine_compare_exact_p2, affine_ratio
from kornforge.scenarios import ScenarioSpec, generate, run
from kornforge.sweep import fit_loglog

from conftest import two_body

# crack families whose strain-free part is a single rigid motion per body
RIGID_FAMILIES = {
    "two_body": {"kind": "two_body", "L": 0.125},
    "single_rectangle": {"kind": "single_rectangle", "L": 0.25, "aspect": 0.5},
    "random_rectangles": {"kind": "random_rectangles", "count": 2,
                          "size_range": [0.0625, 0.125], "amplitude": 0.05},
}
# local scenarios with strain: base shear on top of each family
SHEAR_FAMILIES = {"none": {"kind": "none"}, **RIGID_FAMILIES}
# shrink factor 1 without the gate keeps the inner square non-empty for these sizes
OPEN = LocalConfig(C_shrink=1.0, enforce_gate=False)
STRICT = LocalConfig()
CONFIGS = {"open": OPEN, "strict": STRICT}

# largest chain constant over calibration seeds 1000..1049 of the crack sampler below
JOHN_BASELINE = 64.0
C_PROBE = 1.0


def _shear_spec(fam, n=256, gamma=0.1):
    return ScenarioSpec({"grid": {"n": n}, "family": fam, "field": {"gamma": gamma}})


def _spread(values):
    """max/min - 1 over a series; zero for an all-zero series."""
    v = np.asarray(values, float)
    if np.all(v == 0):
        return 0.0
    if v.min() <= 0:
        return float("inf")
    return float(v.max() / v.min() - 1)


def test_criterion_01_exceptional_set_scaling(acceptance):
    h = 2.0 / 1024
    Ls = np.geomspace(2 * h, 20 * h, 8)
    t0 = time.perf_counter()
    rows = [run(ScenarioSpec({"id": f"c1-{k}", "grid": {"n": 1024},
                              "family": {"kind": "two_body", "L": float(L)}}))["summary"]
            for k, L in enumerate(Ls)]
    elapsed = time.perf_counter() - t0
    H = np.array([r["jump_len"] for r in rows])
    area = np.array([r["area_E"] for r in rows])
    perim = np.array([r["perim_E"] for r in rows])
    fa = fit_loglog(H, area)
    fp = fit_loglog(H, perim)
    ok = abs(fa.slope - 2) <= 0.2 and abs(fp.slope - 1) <= 0.2 and elapsed <= 300
    fallbacks = sum("fallback=True" in r["flags"] for r in rows)
    acceptance(1, ok, f"area slope {fa.slope:.3f} (want 2+-0.2), perimeter slope {fp.slope:.3f} "
                      f"(want 1+-0.2), {fallbacks}/{len(rows)} runs fell back, {elapsed:.1f}s")
    assert ok


def test_criterion_02_rigid_exactness(acceptance):
    worst = 0.0
    runs = 0
    for name, fam in RIGID_FAMILIES.items():
        for seed in range(3):
            spec = ScenarioSpec({"grid": {"n": 256}, "seed": seed, "family": fam,
                                 "field": {"omega": 0.2, "b": [0.1, 0.3]}})
            f, _ = generate(spec)
            for cfg_name, cfg in CONFIGS.items():
                rep = local_estimate(f, config=cfg)
                if cfg_name == "open":
                    assert not rep.flags["fallback"], name
                worst = max(worst, rep.residual_u_q / f.scale, rep.residual_grad_p / f.scale)
                runs += 1
    ok = worst <= 1e-10
    acceptance(2, ok, f"max residual / field scale {worst:.2e} over {runs} runs (want <= 1e-10)")
    assert ok


def test_criterion_03_scale_invariance(acceptance):
    worst = 0.0
    for fam in SHEAR_FAMILIES.values():
        f, _ = generate(_shear_spec(fam))
        for cfg in CONFIGS.values():
            base = local_estimate(f, config=cfg)
            for lam in (0.5, 2.0):
                rep = local_estimate(f.scaled(lam), config=cfg)
                for a, b in ((rep.const_u, base.const_u), (rep.const_grad, base.const_grad)):
                    dev = abs(a - b) / abs(b) if b else (0.0 if a == 0 else np.inf)
                    worst = max(worst, dev)
    ok = worst <= 1e-8
    acceptance(3, ok, f"max relative change of constants under lambda in {{1/2, 2}}: {worst:.2e} (want <= 1e-8)")
    assert ok


def _random_gated_rects(grid, seed, theta, target):
    rng = np.random.default_rng(seed)
    while True:
        rects = []
        for _ in range(rng.integers(1, 4)):
            w, v = rng.integers(1, 3, 2)
            i, j = rng.integers(300, 721, 2)
            rects.append(Rect(int(i), int(i + w), int(j), int(j + v)))
        rs = RectangleSet(grid, tuple(rects))
        if gate_holds(rs, theta, 1.0, target):
            return rs


def test_criterion_04_structure_properties(acceptance):
    g = Grid((0, 0), 1.0, 1024)
    theta, target = 0.5, 0.5
    hier = SquareHierarchy(g, theta)
    fails = 0
    perim, area = [], []
    for seed in range(200):
        led = classify(_random_gated_rects(g, seed, theta, target), hier, 1.0, target, True)
        assert led.feasible
        st = structure_check(led)
        fails += not (st.small_sum and st.empty_beyond and st.coverage)
        perim.append(st.perimeter_const)
        area.append(st.area_const)
    perim, area = np.array(perim), np.array(area)
    finite = bool(np.isfinite(perim).all() and np.isfinite(area).all())
    # the constant of a batch is its supremum; two disjoint seed batches must agree
    sp = _spread([perim[:100].max(), perim[100:].max()])
    sa = _spread([area[:100].max(), area[100:].max()])
    ok = fails == 0 and finite and sp <= 0.2 and sa <= 0.2
    acceptance(4, ok, f"(i)-(iii) failures {fails}/200; (iv) batch sups {perim[:100].max():.1f}/"
                      f"{perim[100:].max():.1f} spread {sp:.1%}, (v) batch sups {area[:100].max():.1f}/"
                      f"{area[100:].max():.1f} spread {sa:.1%} (want <= 20%); per-seed (iv) range "
                      f"{perim.min():.1f}..{perim.max():.1f}")
    assert ok


# gated healing: one-cell inclusions on 1024^2 pass the feasibility gate at these settings
GATED = LocalConfig(theta=0.5, C_shrink=50.0)


def _heal_run(f, cfg):
    g = f.grid
    mod = modify(f, cfg.fit_margin)
    mu_bar = inner_half_width(f, cfg.C_shrink)
    led = classify(mod.rects, SquareHierarchy(g, cfg.theta), mod.shrunk_mu, mu_bar, True)
    assert led.feasible, led.reason
    elastic = lp_norm(strain(f), RegionMask.full(g), 2)
    out = heal(mod.modified, led, internal_exponent(1.5, 2.0), elastic)
    inner = RegionMask.square(g, g.center, mu_bar).cells
    hv, hh = out.healed.jump_edges(tol=1e-12 * out.healed.scale)
    left = int((hv & inner[:-1, :] & inner[1:, :]).sum() + (hh & inner[:, :-1] & inner[:, 1:]).sum())
    off = inner & ~out.exceptional.cells
    exact = np.array_equal(out.healed.corners[off], mod.modified.corners[off])
    off_all = off & ~mod.rects.mask().cells
    exact_input = np.array_equal(out.healed.corners[off_all], f.corners[off_all])
    bound = np.exp(1 / (1 - out.eta_blend))
    return left, exact and exact_input, out.max_product, bound, sum(len(lv.B) for lv in led.levels)


def test_criterion_05_healing_soundness(acceptance):
    h = 2.0 / 1024
    edges, inexact, worst, bad_squares = 0, 0, 0.0, 0
    runs = 0
    for seed in range(10):
        spec = ScenarioSpec({"grid": {"n": 1024}, "seed": seed, "field": {"gamma": 0.1},
                             "family": {"kind": "random_rectangles", "count": 1,
                                        "size_range": [h, 1.4 * h], "amplitude": 0.05}})
        f, _ = generate(spec)
        left, exact, prod, bound, nb = _heal_run(f, GATED)
        edges += left
        inexact += not exact
        worst = max(worst, prod / bound)
        bad_squares += nb
        runs += 1
    ok = edges == 0 and inexact == 0 and worst <= 1
    acceptance(5, ok, f"{runs} gated runs with {bad_squares} bad squares: jump edges left in inner square {edges}, "
                      f"inexact runs {inexact}, max product / exp(1/(1-eta)) {worst:.2e}")
    assert ok


def test_criterion_06_partition_of_unity(acceptance):
    sum_err, grad, mult = 0.0, 0.0, 0
    for s in (0.25, 0.125, 0.0625, 0.03125):
        k = int(round(1 / s))
        for seed in range(20):
            rng = np.random.default_rng(seed)
            idx = rng.choice(k * k, size=min(k * k, int(rng.integers(1, 30))), replace=False)
            a, b = np.divmod(idx, k)
            centers = np.stack([-1 + s * (2 * a + 1), -1 + s * (2 * b + 1)], 1)
            pou = build_pou(centers, s)
            near = centers[rng.integers(0, len(centers), 3000)] + rng.uniform(-1.2 * s, 1.2 * s, (3000, 2))
            pts = np.concatenate([rng.uniform(-1, 1, (3000, 2)), near])
            chk = check_pou(pou, pts)
            sum_err = max(sum_err, chk.sum_error)
            grad = max(grad, chk.grad_const)
            mult = max(mult, chk.max_multiplicity)
    ok = sum_err <= 1e-12 and grad <= 16 and mult <= 4
    acceptance(6, ok, f"sum error {sum_err:.1e} (want <= 1e-12), max |grad phi| s {grad:.2f} (want <= 16), "
                      f"multiplicity {mult} (want <= 4)")
    assert ok


def test_criterion_07_affine_comparability(acceptance):
    half_err = 0.0
    for n in (16, 64):
        g = Grid((0, 0), 1.0, n)
        left = RegionMask.box(g, (-1, -1), (0, 1))
        half_err = max(half_err, abs(affine_ratio([[1, 0], [0, 0]], [0, 0], left, RegionMask.full(g), 1.0) - 2))
    g = Grid((0, 0), 1.0, 16)
    full = RegionMask.full(g)
    rng = np.random.default_rng(2024)
    excess = -np.inf
    for k in range(20):
        m = RegionMask(g, rng.random((16, 16)) < 0.75)
        mc = affine_compare_constant(m, full, 2.0, trials=300, seed=k)
        excess = max(excess, mc - affine_compare_exact_p2(m, full))
    ok = half_err <= 1e-9 and excess <= 1e-9
    acceptance(7, ok, f"half-square ratio error {half_err:.1e} (want <= 1e-9); "
                      f"max Monte-Carlo minus exact over 20 masks {excess:.2e} (want <= 1e-9)")
    assert ok


def _crack_box(h, seed):
    r = np.random.default_rng(seed)
    x0 = -0.75 + h * r.integers(0, 20)
    y0 = 0.5 + h * r.integers(0, 6)
    return (x0, x0 + h * r.integers(2, 7), y0, y0 + h * r.integers(1, 4))


def test_criterion_08_john_certificates(acceptance):
    diag = []
    for n in (64, 128, 256):
        cert = john_verify(RegionMask.full(Grid((0, 0), 1.0, n)), None, None, random_count=10, mode="straight")
        diag.append(cert.constant)
    diag_ok = all(abs(c - np.sqrt(2)) <= 0.05 for c in diag)
    dom = LipschitzGraphDomain.sawtooth(1.0, 0.5)
    cg = dom.chart_grid(16)
    cover = whitney_cover(dom, cg)
    consts, uncertified, entered = [], 0, 0
    for seed in range(50):
        f = two_body(cg, _crack_box(cg.h, seed), RigidMotion(0.1, (0, 0)), RigidMotion())
        sh = boundary_bad_squares(f, dom, cover)
        assert not sh.fallback
        cert = john_verify(sh.V, cover, sh.P, random_count=50, seed=seed)
        uncertified += not cert.certified
        entered += cert.entered_P
        consts.append(cert.constant)
    ok = diag_ok and uncertified == 0 and entered == 0 and max(consts) <= JOHN_BASELINE
    acceptance(8, ok, f"square diagonal {', '.join(f'{c:.4f}' for c in diag)} (want sqrt2+-0.05); "
                      f"50 cracked sawtooth configs: uncertified {uncertified}, chains entering P {entered}, "
                      f"max constant {max(consts):.2f} (baseline {JOHN_BASELINE})")
    assert ok


def _box_mask(g, rng):
    lo = rng.uniform(-1, 0.6, 2)
    return RegionMask.box(g, lo, np.minimum(lo + rng.uniform(0.1, 0.9, 2), 1))


def test_criterion_09_jump_control(acceptance):
    g = Grid((0, 0), 1.0, 64)
    free_fail, free_max = 0, 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        M = rng.normal(0, 0.3, (2, 2))
        Q = rng.normal(0, 0.3, 2)
        f = build_field(g, CrackSet(), lambda pts, c: pts @ M.T + Q * (pts**2)[..., ::-1])
        res = modify(f)
        for _ in range(5):
            jc = jump_control_check(res, _box_mask(g, rng), c=2.0)
            free_fail += not jc.passed
            free_max = max(free_max, jc.ratio)
    body_fail, body_max, report = 0, 0.0, []
    shear = build_field(g, CrackSet(), linear_sampler([[0, 0.1], [0, 0]]))
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        k = int(rng.integers(2, 9))
        x0, y0 = g.h * rng.integers(-20, 20, 2)
        inner = RigidMotion(rng.normal(0, 0.2), tuple(rng.normal(0, 0.1, 2)))
        f = two_body(g, (x0, x0 + k * g.h, y0, y0 + k * g.h), inner, RigidMotion())
        res = modify(f.with_corners(f.corners + shear.corners))
        for _ in range(5):
            jc = jump_control_check(res, _box_mask(g, rng), C_probe=C_PROBE)
            body_max = max(body_max, jc.ratio)
            if not jc.passed:
                body_fail += 1
                report.append(round(jc.ratio, 4))
    ok = free_fail == 0 and body_fail == 0
    acceptance(9, ok, f"crack-free: {free_fail}/100 fail, max ratio {free_max:.3f} (c = 2); two_body: "
                      f"{body_fail}/100 fail, max ratio {body_max:.3f} (C_probe = {C_PROBE}); failing ratios {report}")
    assert ok


def test_criterion_10_sbv_recovery(acceptance):
    families = {"two_body": {"kind": "two_body", "L": 0.25},
                "single_rectangle": {"kind": "single_rectangle", "L": 0.3},
                "random_rectangles": {"kind": "random_rectangles", "count": 4}}
    worst, perims, runs = 0.0, [], 0
    for fam in families.values():
        for frac in (0.04, 0.02, 0.01):
            out = run(ScenarioSpec({"mode": "recovery", "grid": {"n": 1024, "mu": 1.25},
                                    "family": fam, "epsilon_frac": frac}))
            s = out["summary"]
            eps = out["report"]["epsilon"]
            worst = max(worst, s["area_E"] / eps)
            perims.append(s["perim_E"])
            runs += 1
    ok = worst <= 1 and all(np.isfinite(perims))
    acceptance(10, ok, f"{runs} runs: max |E| / epsilon {worst:.3f} (want <= 1), "
                       f"perimeter(E) in [{min(perims):.2f}, {max(perims):.2f}]")
    assert ok


def test_criterion_11_refinement_stability(acceptance):
    cases = {f"{name}/open": (fam, OPEN) for name, fam in SHEAR_FAMILIES.items()}
    cases["two_body/strict"] = (RIGID_FAMILIES["two_body"], STRICT)
    worst, worst_case = 0.0, ""
    for name, (fam, cfg) in cases.items():
        cu, cg = [], []
        for n in (128, 256, 512):
            rep = local_estimate(generate(_shear_spec(fam, n))[0], config=cfg)
            cu.append(rep.const_u)
            cg.append(rep.const_grad)
        for label, series in (("u", cu), ("grad", cg)):
            sp = _spread(series)
            if sp >= worst:
                worst, worst_case = sp, f"{name} {label} {', '.join(f'{c:.4f}' for c in series)}"
    ok = worst <= 0.2
    acceptance(11, ok, f"{len(cases)} scenarios at n = 128, 256, 512: max spread {worst:.1%} (want <= 20%), "
                       f"worst {worst_case}")
    assert ok
