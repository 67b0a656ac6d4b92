"""Infinitesimal rigid motions and least-squares projection onto them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh

from .field import DisplacementField, RegionMask, lp_norm


class DomainError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class RigidMotion:
    """a(x) = A x + b with A = [[0, -omega], [omega, 0]]."""

    omega: float = 0.0
    b: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "omega", float(self.omega))
        object.__setattr__(self, "b", (float(self.b[0]), float(self.b[1])))

    @property
    def A(self) -> np.ndarray:
        w = self.omega
        return np.array([[0.0, -w], [w, 0.0]])

    @property
    def bvec(self) -> np.ndarray:
        return np.array(self.b)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        w = self.omega
        return np.stack([-w * x[..., 1] + self.b[0], w * x[..., 0] + self.b[1]], axis=-1)

    def sampler(self):
        return lambda points, centers: self(points)

    def __sub__(self, other: "RigidMotion") -> "RigidMotion":
        return RigidMotion(self.omega - other.omega, (self.b[0] - other.b[0], self.b[1] - other.b[1]))

    def __add__(self, other: "RigidMotion") -> "RigidMotion":
        return RigidMotion(self.omega + other.omega, (self.b[0] + other.b[0], self.b[1] + other.b[1]))

    def scaled(self, lam: float) -> "RigidMotion":
        """Motion matching the rescaling x -> lam x, u -> lam u."""
        return RigidMotion(self.omega, (lam * self.b[0], lam * self.b[1]))

    def to_dict(self) -> dict:
        return {"omega": self.omega, "b": list(self.b)}


def fit_rigid(points, values, weights=None) -> RigidMotion:
    """Weighted least-squares rigid motion through point samples."""
    x = np.asarray(points, dtype=float).reshape(-1, 2)
    u = np.asarray(values, dtype=float).reshape(-1, 2)
    w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    W = w.sum()
    if W <= 0:
        raise DomainError("rigid fit needs positive total weight")
    xbar = (w[:, None] * x).sum(0) / W
    ubar = (w[:, None] * u).sum(0) / W
    d = x - xbar
    moment = float((w * (d**2).sum(1)).sum())
    if moment <= 0:
        # single point: rotation is undetermined, keep the translation
        return RigidMotion(0.0, tuple(ubar))
    torque = float((w * (-d[:, 1] * u[:, 0] + d[:, 0] * u[:, 1])).sum())
    omega = torque / moment
    b = ubar - omega * np.array([-xbar[1], xbar[0]])
    return RigidMotion(omega, tuple(b))


def project_rigid(field: DisplacementField, mask: RegionMask) -> RigidMotion:
    """L2(mask) projection onto rigid motions, using cell-center values."""
    if mask.is_empty:
        raise DomainError("cannot project onto rigid motions over an empty mask")
    pts = field.grid.centers[mask.cells]
    vals = field.cell_values()[mask.cells]
    return fit_rigid(pts, vals)


def rigid_distance(a1: RigidMotion, a2: RigidMotion, mask: RegionMask, p: float) -> float:
    if mask.is_empty:
        raise DomainError("rigid distance needs a nonempty mask")
    diff = a1 - a2
    vals = np.zeros(mask.grid.centers.shape)
    vals[mask.cells] = diff(mask.grid.centers[mask.cells])
    return lp_norm(vals, mask, p)


# -- affine comparability ------------------------------------------------------


def _affine_basis(centers: np.ndarray, origin, radius) -> np.ndarray:
    """Six basis maps evaluated at cell centers in normalized coordinates.

    Returns shape (m, 2, 6): coefficient k multiplies column k.
    """
    y = (centers - np.asarray(origin)) / radius
    m = len(y)
    B = np.zeros((m, 2, 6))
    B[:, 0, 0] = y[:, 0]
    B[:, 0, 1] = y[:, 1]
    B[:, 1, 2] = y[:, 0]
    B[:, 1, 3] = y[:, 1]
    B[:, 0, 4] = 1.0
    B[:, 1, 5] = 1.0
    return B


def _check_square(mask: RegionMask, square: RegionMask, c_bar: float, radius: float):
    if not mask.issubset(square):
        raise PreconditionError("mask must lie inside the ambient square")
    if mask.area < c_bar * radius**2 * (1 - 1e-12):
        raise PreconditionError(
            f"mask area {mask.area:.4g} is below c_bar*R^2 = {c_bar * radius**2:.4g}"
        )


def _square_geometry(square: RegionMask):
    g = square.grid
    pts = g.centers[square.cells]
    lo = pts.min(0) - g.h / 2
    hi = pts.max(0) + g.h / 2
    return 0.5 * (lo + hi), 0.5 * float(np.max(hi - lo))


def affine_compare_constant(
    mask: RegionMask,
    square: RegionMask,
    p: float,
    trials: int = 500,
    seed: int = 0,
    c_bar: float = 0.5,
) -> float:
    """Largest ratio ||a||_Lp(square) / ||a||_Lp(mask) over random affine maps.

    Maps are drawn in coordinates normalized by the square (center and half
    width), so the value is unchanged when mask and square are rescaled.
    Each trial draws from its own generator keyed by (seed, trial).
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    origin, radius = _square_geometry(square)
    _check_square(mask, square, c_bar, radius)
    g = square.grid
    Bs = _affine_basis(g.centers[square.cells], origin, radius)
    Bm = _affine_basis(g.centers[mask.cells], origin, radius)
    best = 0.0
    for t in range(trials):
        coef = np.random.default_rng([seed, t]).uniform(-1.0, 1.0, 6)
        vm = np.linalg.norm(Bm @ coef, axis=1)
        den = float((vm**p).sum()) ** (1 / p)
        if den < 1e-12:
            continue
        vs = np.linalg.norm(Bs @ coef, axis=1)
        num = float((vs**p).sum()) ** (1 / p)
        best = max(best, num / den)
    return best


def affine_compare_exact_p2(mask: RegionMask, square: RegionMask, c_bar: float = 0.5) -> float:
    """Exact supremum of the L2 ratio via a 6x6 generalized eigenproblem."""
    origin, radius = _square_geometry(square)
    _check_square(mask, square, c_bar, radius)
    g = square.grid
    Bs = _affine_basis(g.centers[square.cells], origin, radius).reshape(-1, 6)
    Bm = _affine_basis(g.centers[mask.cells], origin, radius).reshape(-1, 6)
    vals = eigh(Bs.T @ Bs, Bm.T @ Bm, eigvals_only=True)
    return float(np.sqrt(vals.max()))


def affine_ratio(a_matrix, a_offset, mask: RegionMask, square: RegionMask, p: float) -> float:
    """Ratio for one explicit affine map x -> M x + c (physical coordinates)."""
    M = np.asarray(a_matrix, float)
    c = np.asarray(a_offset, float)
    g = square.grid
    vs = g.centers[square.cells] @ M.T + c
    vm = g.centers[mask.cells] @ M.T + c
    num = (np.linalg.norm(vs, axis=1) ** p).sum() ** (1 / p)
    den = (np.linalg.norm(vm, axis=1) ** p).sum() ** (1 / p)
    return float(num / den)
