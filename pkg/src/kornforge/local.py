"""Korn estimate on a square away from the boundary: modify, classify, heal, fit."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field, asdict

import numpy as np

from .field import DisplacementField, RegionMask, gradient, lp_norm, strain
from .modification import modify
from .multiscale import SquareHierarchy, classify, heal, structure_check
from .rigid import RigidMotion, project_rigid


class ParameterError(ValueError):
    pass


@dataclass
class LocalConfig:
    theta: float = 0.25
    C_shrink: float = 40.0
    fit_margin: int = 2
    lam: float = 1.0
    epsilon: float | None = None
    pou_width: float = 0.125
    enforce_gate: bool = True
    track: bool = True
    min_square_cells: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class KornReport:
    rigid: RigidMotion
    exceptional: RegionMask
    shrunk_mu: float
    residual_u_q: float
    residual_grad_p: float
    elastic: float
    jump_length: float
    const_u: float
    const_grad: float
    p: float
    q: float
    p_internal: float
    flags: dict = dc_field(default_factory=dict)
    excluded_area: float = 0.0
    diagnostics: dict = dc_field(default_factory=dict)

    @property
    def area_E(self) -> float:
        return self.exceptional.area

    @property
    def perim_E(self) -> float:
        return self.exceptional.perimeter()

    def to_dict(self) -> dict:
        return {
            "rigid": self.rigid.to_dict(),
            "shrunk_mu": self.shrunk_mu,
            "area_E": self.area_E,
            "perim_E": self.perim_E,
            "residual_u_q": self.residual_u_q,
            "residual_grad_p": self.residual_grad_p,
            "elastic": self.elastic,
            "jump_length": self.jump_length,
            "const_u": self.const_u,
            "const_grad": self.const_grad,
            "p": self.p,
            "q": self.q,
            "p_internal": self.p_internal,
            "excluded_area": self.excluded_area,
            "flags": self.flags,
            "diagnostics": self.diagnostics,
        }


def internal_exponent(p: float, q: float) -> float:
    """Smallest usable p with q <= 2p/(2-p), kept strictly below 2."""
    return float(min(max(p, 2.0 * q / (q + 2.0)), 1.99))


def inner_half_width(field: DisplacementField, C_shrink: float) -> float:
    """mu - C*H1(J), floored to the cell lattice and clipped at 0."""
    g = field.grid
    raw = g.mu - C_shrink * field.jump_length()
    if raw <= 0:
        return 0.0
    return g.h * np.floor(raw / g.h + 1e-9)


def jump_adjacent_cells(field: DisplacementField) -> np.ndarray:
    jv, jh = field.jump_edges()
    n = field.grid.n
    m = np.zeros((n, n), bool)
    m[:-1, :] |= jv
    m[1:, :] |= jv
    m[:, :-1] |= jh
    m[:, 1:] |= jh
    return m


def normalized_constant(residual: float, power_of_mu: float, elastic: float, scale_tol: float,
                        elastic_tol: float = 0.0) -> float:
    if elastic > elastic_tol:
        return residual / (power_of_mu * elastic)
    return 0.0 if residual <= scale_tol else float("inf")


def residuals(field: DisplacementField, a: RigidMotion, mask: RegionMask, p: float, q: float):
    """Residuals of the field against a rigid motion; gradient skips crack-adjacent cells."""
    g = field.grid
    if mask.is_empty:
        return 0.0, 0.0, 0.0
    diff = np.zeros((g.n, g.n, 2))
    diff[mask.cells] = field.cell_values()[mask.cells] - a(g.centers[mask.cells])
    r_u = lp_norm(diff, mask, q)
    near = jump_adjacent_cells(field)
    gmask = RegionMask(g, mask.cells & ~near)
    G = gradient(field) - a.A
    r_g = lp_norm(G, gmask, p)
    return r_u, r_g, g.h**2 * float((mask.cells & near).sum())


def variation_proxy(field: DisplacementField, mask: RegionMask) -> float:
    """Total variation of u restricted to the mask: bulk gradient plus jumps and mask boundary traces."""
    g = field.grid
    h = g.h
    m = mask.cells
    bulk = float(np.sqrt((gradient(field) ** 2).sum(axis=(-2, -1)))[m].sum() * h * h)
    c = field.corners
    vj, hj = field.midpoint_jumps()
    both_v = m[:-1, :] & m[1:, :]
    both_h = m[:, :-1] & m[:, 1:]
    jumps = h * (np.linalg.norm(vj[both_v], axis=-1).sum() + np.linalg.norm(hj[both_h], axis=-1).sum())
    # traces on edges with exactly one side in the mask
    lt = 0.5 * (c[:-1, :, 1] + c[:-1, :, 3])
    rt = 0.5 * (c[1:, :, 0] + c[1:, :, 2])
    bt = 0.5 * (c[:, :-1, 2] + c[:, :-1, 3])
    tt = 0.5 * (c[:, 1:, 0] + c[:, 1:, 1])
    tr = (
        np.linalg.norm(lt[m[:-1, :] & ~m[1:, :]], axis=-1).sum()
        + np.linalg.norm(rt[~m[:-1, :] & m[1:, :]], axis=-1).sum()
        + np.linalg.norm(bt[m[:, :-1] & ~m[:, 1:]], axis=-1).sum()
        + np.linalg.norm(tt[~m[:, :-1] & m[:, 1:]], axis=-1).sum()
    )
    return float(bulk + jumps + h * tr)


def local_estimate(field: DisplacementField, p: float = 1.5, q: float = 2.0,
                   config: LocalConfig | None = None) -> KornReport:
    cfg = config or LocalConfig()
    if not (1.0 <= p < 2.0):
        raise ParameterError(f"p must lie in [1, 2), got {p}")
    if q < 1.0:
        raise ParameterError(f"q must be >= 1, got {q}")
    g = field.grid
    full = RegionMask.full(g)
    elastic = lp_norm(strain(field), full, 2)
    H = field.jump_length()
    p_int = internal_exponent(p, q)
    flags = {"fallback": False, "infeasible": False, "reason": "", "heal_ok": True,
             "off_E_exact": True, "C_shrink": cfg.C_shrink}
    diag: dict = {}
    tol = 1e-10 * max(field.scale, 1e-300)

    def fallback(reason: str, mu_bar: float) -> KornReport:
        flags.update(fallback=True, infeasible=True, reason=reason)
        return KornReport(RigidMotion(), full, mu_bar, 0.0, 0.0, elastic, H, 0.0, 0.0,
                          p, q, p_int, flags, 0.0, diag)

    if H == 0:
        inner = full
        a = project_rigid(field, inner)
        E = RegionMask.empty(g)
        mu_bar = g.mu
    else:
        mu_bar = inner_half_width(field, cfg.C_shrink)
        if mu_bar <= 0:
            return fallback("jump set too long for the inner square", 0.0)
        mod = modify(field, cfg.fit_margin, cfg.epsilon, cfg.lam)
        diag["cover"] = {
            "n_rects": len(mod.rects), "total_diameter": mod.rects.total_diameter,
            "budget_holds": mod.rects.bound_holds, "budget_ratio": mod.rects.bound_ratio,
            "shrunk_mu": mod.shrunk_mu, "epsilon": mod.epsilon,
        }
        hier = SquareHierarchy(g, cfg.theta, cfg.min_square_cells)
        ledger = classify(mod.rects, hier, mod.shrunk_mu, mu_bar, cfg.enforce_gate)
        diag["ledger"] = ledger.summary()
        if not ledger.feasible:
            return fallback(ledger.reason, mu_bar)
        st = structure_check(ledger)
        diag["structure"] = {"i": st.small_sum, "ii": st.empty_beyond, "iii": st.coverage,
                             "iv_const": st.perimeter_const, "v_const": st.area_const}
        outcome = heal(mod.modified, ledger, p_int, elastic, cfg.pou_width, cfg.track)
        diag["heal"] = outcome.summary()
        inner = RegionMask.square(g, g.center, mu_bar)
        hv, hh = outcome.healed.jump_edges(tol=1e-12 * max(outcome.healed.scale, 1e-300))
        ic = inner.cells
        left = int((hv & ic[:-1, :] & ic[1:, :]).sum() + (hh & ic[:, :-1] & ic[:, 1:]).sum())
        flags["heal_ok"] = left == 0
        flags["jump_edges_left"] = left
        off = inner.cells & ~outcome.exceptional.cells
        flags["off_E_exact"] = bool(np.array_equal(outcome.healed.corners[off], mod.modified.corners[off]))
        flags["product_ok"] = outcome.product_ok
        a = project_rigid(outcome.healed, inner)
        E = outcome.exceptional | mod.rects.mask()
    inner = RegionMask.square(g, g.center, mu_bar)
    good = inner - E
    r_u, r_g, excluded = residuals(field, a, good, p, q)
    # strain below roundoff of the field counts as zero
    e_tol = tol * g.mu
    c_u = normalized_constant(r_u, g.mu ** (2.0 / q), elastic, tol * good.area ** (1 / q), e_tol)
    c_g = normalized_constant(r_g, g.mu ** (2.0 / p - 1.0), elastic, tol / g.h * good.area ** (1 / p), e_tol)
    diag["variation_proxy"] = variation_proxy(field, good)
    return KornReport(a, E, mu_bar, r_u, r_g, elastic, H, c_u, c_g, p, q, p_int, flags, excluded, diag)
