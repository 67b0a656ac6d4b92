import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kornforge.field import CrackSet, Grid, build_field, linear_sampler, rigid_sampler
from kornforge.local import (
    LocalConfig, ParameterError, inner_half_width, internal_exponent, local_estimate,
)
from kornforge.rigid import RigidMotion

from conftest import two_body

G = Grid((0, 0), 1.0, 32)


def _affine(M, b=(0.0, 0.0), grid=G):
    M = np.asarray(M, float)
    return build_field(grid, CrackSet(), linear_sampler(M, b))


def test_rigid_field_is_recovered_exactly():
    f = build_field(G, CrackSet(), rigid_sampler(0.3, (0.1, -0.2)))
    rep = local_estimate(f)
    assert rep.area_E == 0 and not rep.flags["fallback"]
    assert rep.rigid.omega == pytest.approx(0.3, abs=1e-12)
    assert np.allclose(rep.rigid.b, (0.1, -0.2), atol=1e-12)
    assert rep.residual_u_q <= 1e-12 and rep.residual_grad_p <= 1e-12
    assert rep.const_u == 0.0 and rep.const_grad == 0.0


def test_pure_shear_constants():
    # u = (0.2 y, 0): strain e12 = 0.1, the best rigid fit removes the skew part
    rep = local_estimate(_affine([[0, 0.2], [0, 0]]), p=1.5, q=2.0)
    assert rep.elastic == pytest.approx(0.1 * np.sqrt(2) * 2.0, rel=1e-12)
    assert rep.rigid.omega == pytest.approx(-0.1, abs=1e-12)
    # remaining gradient is the symmetric part, constant over the square
    assert rep.residual_grad_p == pytest.approx(0.1 * np.sqrt(2) * 4 ** (1 / 1.5), rel=1e-12)
    assert 0 < rep.const_u < 10 and 0 < rep.const_grad < 10


@settings(max_examples=10, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(0.05, 20.0))
def test_constants_are_scale_invariant(a, b, c, lam):
    M = np.array([[a, b], [c, -a]])
    if np.abs(M + M.T).max() < 1e-3:
        M[0, 1] += 0.5
    f = _affine(M)
    base = local_estimate(f)
    scaled = local_estimate(f.scaled(lam))
    assert scaled.const_u == pytest.approx(base.const_u, rel=1e-9)
    assert scaled.const_grad == pytest.approx(base.const_grad, rel=1e-9)
    # joint dilation of domain and values keeps the gradient, hence the rotation
    assert scaled.rigid.omega == pytest.approx(base.rigid.omega, rel=1e-9, abs=1e-12)


@settings(max_examples=8, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_adding_a_rigid_motion_shifts_the_fit(w, b1, b2):
    f = _affine([[0.1, 0.3], [0.0, -0.2]])
    g = build_field(G, CrackSet(), rigid_sampler(w, (b1, b2)))
    base = local_estimate(f)
    shifted = local_estimate(f.with_corners(f.corners + g.corners))
    assert shifted.rigid.omega == pytest.approx(base.rigid.omega + w, abs=1e-10)
    assert shifted.residual_u_q == pytest.approx(base.residual_u_q, rel=1e-8, abs=1e-12)


def test_cracked_field_runs_the_full_pipeline():
    g = Grid((0, 0), 1.0, 64)
    f = two_body(g, (-0.0625, 0.0625, -0.03125, 0.03125), RigidMotion(0.1, (0.02, 0)), RigidMotion())
    shear = _affine([[0, 0.05], [0, 0]], grid=g)
    f = f.with_corners(f.corners + shear.corners)
    rep = local_estimate(f, config=LocalConfig(C_shrink=1.0, enforce_gate=False))
    assert not rep.flags["fallback"]
    assert rep.flags["heal_ok"] and rep.flags["off_E_exact"] and rep.flags["product_ok"]
    assert rep.shrunk_mu == pytest.approx(inner_half_width(f, 1.0))
    # the inner body is a different rigid motion, the exceptional set must hold it
    assert rep.area_E > 0
    assert np.isfinite(rep.const_u) and np.isfinite(rep.const_grad)


def test_default_shrink_falls_back_on_long_cracks():
    g = Grid((0, 0), 1.0, 64)
    f = two_body(g, (-0.25, 0.25, -0.25, 0.25), RigidMotion(0.1, (0, 0)), RigidMotion())
    rep = local_estimate(f)
    assert rep.flags["fallback"] and rep.flags["infeasible"]
    assert rep.area_E == pytest.approx(4.0)
    assert rep.shrunk_mu == 0.0


def test_parameter_validation_and_internal_exponent():
    f = _affine([[0, 1], [0, 0]])
    with pytest.raises(ParameterError):
        local_estimate(f, p=2.0)
    with pytest.raises(ParameterError):
        local_estimate(f, p=0.5)
    with pytest.raises(ParameterError):
        local_estimate(f, q=0.5)
    assert internal_exponent(1.5, 2.0) == 1.5
    assert internal_exponent(1.0, 6.0) == pytest.approx(1.5)
    assert internal_exponent(1.0, 1000.0) == 1.99
