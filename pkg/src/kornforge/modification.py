"""Crack covers by lattice rectangles and rigid in-fill of the covered region."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import binary_dilation

from .field import (
    CrackSet,
    DisplacementField,
    Grid,
    RegionMask,
    sym_jump_magnitude,
    total_ed_variation,
    strain,
    lp_norm,
)
from .rigid import RigidMotion, fit_rigid


class CoverageError(ValueError):
    pass


@dataclass(frozen=True)
class Rect:
    """Closed lattice rectangle covering cells [i0, i1) x [j0, j1)."""

    i0: int
    i1: int
    j0: int
    j1: int

    def intersects_or_touches(self, other: "Rect") -> bool:
        return not (
            self.i1 < other.i0 or other.i1 < self.i0 or self.j1 < other.j0 or other.j1 < self.j0
        )

    def overlaps(self, other: "Rect") -> bool:
        """Open rectangles share area."""
        return not (
            self.i1 <= other.i0 or other.i1 <= self.i0 or self.j1 <= other.j0 or other.j1 <= self.j0
        )

    def union(self, other: "Rect") -> "Rect":
        return Rect(min(self.i0, other.i0), max(self.i1, other.i1),
                    min(self.j0, other.j0), max(self.j1, other.j1))

    def diameter(self, h: float) -> float:
        return h * float(np.hypot(self.i1 - self.i0, self.j1 - self.j0))

    def cells(self, n: int) -> np.ndarray:
        m = np.zeros((n, n), bool)
        m[self.i0:self.i1, self.j0:self.j1] = True
        return m

    def bounds(self, grid: Grid):
        return (grid.xs[self.i0], grid.xs[self.i1]), (grid.ys[self.j0], grid.ys[self.j1])

    def boundary_edges(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Interior grid edges on the rectangle boundary."""
        vert = np.zeros((n - 1, n), bool)
        horiz = np.zeros((n, n - 1), bool)
        for k in (self.i0, self.i1):
            if 0 < k < n:
                vert[k - 1, self.j0:self.j1] = True
        for k in (self.j0, self.j1):
            if 0 < k < n:
                horiz[self.i0:self.i1, k - 1] = True
        return vert, horiz


@dataclass(frozen=True)
class RectangleSet:
    grid: Grid
    rects: tuple[Rect, ...] = ()
    bound_holds: bool = True
    bound_ratio: float = 0.0

    @property
    def diameters(self) -> np.ndarray:
        return np.array([r.diameter(self.grid.h) for r in self.rects])

    @property
    def total_diameter(self) -> float:
        return float(self.diameters.sum()) if self.rects else 0.0

    def __len__(self):
        return len(self.rects)

    def cells(self) -> np.ndarray:
        n = self.grid.n
        m = np.zeros((n, n), bool)
        for r in self.rects:
            m[r.i0:r.i1, r.j0:r.j1] = True
        return m

    def mask(self) -> RegionMask:
        return RegionMask(self.grid, self.cells())

    def boundary_edges(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.grid.n
        vert = np.zeros((n - 1, n), bool)
        horiz = np.zeros((n, n - 1), bool)
        for r in self.rects:
            v, hz = r.boundary_edges(n)
            vert |= v
            horiz |= hz
        return vert, horiz

    def to_list(self) -> list[dict]:
        out = []
        for r in self.rects:
            (x0, x1), (y0, y1) = r.bounds(self.grid)
            out.append({"x0": float(x0), "x1": float(x1), "y0": float(y0), "y1": float(y1),
                        "diameter": r.diameter(self.grid.h)})
        return out


def _edge_components(n: int, vert: np.ndarray, horiz: np.ndarray) -> list[Rect]:
    """Bounding boxes (in node indices) of vertex-connected edge clusters."""
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    node = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    vi, vj = np.nonzero(vert)  # edge at x-node vi+1 from y-node vj to vj+1
    hi, hj = np.nonzero(horiz)
    a = np.concatenate([node[vi + 1, vj], node[hi, hj + 1]])
    b = np.concatenate([node[vi + 1, vj + 1], node[hi + 1, hj + 1]])
    if a.size == 0:
        return []
    m = (n + 1) ** 2
    g = coo_matrix((np.ones(a.size), (a, b)), shape=(m, m))
    _, lab = connected_components(g, directed=False)
    boxes = {}
    for u, v in zip(a, b):
        c = lab[u]
        for nd in (u, v):
            x, y = divmod(int(nd), n + 1)
            bx = boxes.get(c)
            boxes[c] = (x, x, y, y) if bx is None else (
                min(bx[0], x), max(bx[1], x), min(bx[2], y), max(bx[3], y))
    return [Rect(*bx) for bx in boxes.values()]


def merge_rects(rects: list[Rect]) -> list[Rect]:
    """Merge until no two closed rectangles intersect or touch."""
    rects = list(rects)
    changed = True
    while changed:
        changed = False
        out: list[Rect] = []
        for r in rects:
            for k, s in enumerate(out):
                if r.intersects_or_touches(s):
                    out[k] = s.union(r)
                    changed = True
                    break
            else:
                out.append(r)
        rects = out
    return rects


def default_epsilon(strain_energy: float, jump_len: float) -> float:
    """Energy-to-crack ratio; falls back to the crack length for strain-free fields."""
    if jump_len <= 0:
        return 1.0
    if strain_energy <= 0:
        return jump_len
    return strain_energy / jump_len


def cover_cracks(
    grid: Grid,
    crack_edges: tuple[np.ndarray, np.ndarray],
    strain_energy: float,
    epsilon: float | None = None,
    lam: float = 1.0,
    c: float = 1.0,
) -> RectangleSet:
    """Cover jump edges by merged lattice bounding boxes of their clusters.

    ``crack_edges`` are the edges to cover (normally the field's jump edges).
    Flat boxes of a straight crack get one cell of padding on each side,
    clipped to the grid. Reports whether the diameter budget holds.
    """
    n = grid.n
    vert, horiz = crack_edges
    jump_len = grid.h * float(vert.sum() + horiz.sum())
    boxes = []
    for r in _edge_components(n, vert, horiz):
        i0, i1, j0, j1 = r.i0, r.i1, r.j0, r.j1
        if i0 == i1:
            i0, i1 = max(i0 - 1, 0), min(i1 + 1, n)
        if j0 == j1:
            j0, j1 = max(j0 - 1, 0), min(j1 + 1, n)
        boxes.append(Rect(i0, i1, j0, j1))
    rects = tuple(sorted(merge_rects(boxes), key=lambda r: (r.i0, r.j0)))
    if epsilon is None:
        epsilon = default_epsilon(strain_energy, jump_len)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    budget = (1.0 + c * lam) * (jump_len + strain_energy / epsilon)
    total = sum(r.diameter(grid.h) for r in rects)
    ratio = total / budget if budget > 0 else (0.0 if total == 0 else np.inf)
    return RectangleSet(grid, rects, bool(total <= budget * (1 + 1e-12)), float(ratio))


@dataclass(frozen=True)
class ModificationResult:
    modified: DisplacementField
    rects: RectangleSet
    shrunk_mu: float
    motions: tuple[RigidMotion, ...] = ()
    epsilon: float = 0.0
    info: dict = dc_field(default_factory=dict)

    def shrunk_mask(self) -> RegionMask:
        g = self.modified.grid
        return RegionMask.square(g, g.center, self.shrunk_mu)


def apply_modification(
    field: DisplacementField, rects: RectangleSet, fit_margin: int = 2, epsilon: float | None = None
) -> ModificationResult:
    """Replace the field on every rectangle by a rigid fit from its surroundings."""
    g = field.grid
    n = g.n
    F = rects.cells()
    jv, jh = field.jump_edges()
    # every jump edge must sit in some closed rectangle
    cov_v = np.zeros_like(jv)
    cov_h = np.zeros_like(jh)
    for r in rects.rects:
        cov_v[max(r.i0 - 1, 0):r.i1, r.j0:r.j1] = True
        cov_h[r.i0:r.i1, max(r.j0 - 1, 0):r.j1] = True
    if (jv & ~cov_v).any() or (jh & ~cov_h).any():
        raise CoverageError("a jump edge lies outside every rectangle")

    corners = np.array(field.corners)
    values = field.cell_values()
    centers = g.centers
    motions = []
    struct = np.ones((3, 3), bool)
    for r in rects.rects:
        inside = r.cells(n)
        ring = binary_dilation(inside, struct, iterations=fit_margin) & ~F
        src = ring if ring.any() else inside
        a = fit_rigid(centers[src], values[src])
        motions.append(a)
        corners[inside] = a(g.corners[inside])

    bv, bh = rects.boundary_edges()
    crack_v = (field.crack_edges[0] & ~_interior_v(F)) | bv
    crack_h = (field.crack_edges[1] & ~_interior_h(F)) | bh
    crack = CrackSet.from_edges(g, crack_v, crack_h)
    modified = DisplacementField(g, crack, corners, (crack_v, crack_h))
    mu_t = max(g.mu - 3.0 * rects.total_diameter, 0.0)
    e2 = lp_norm(strain(field), RegionMask.full(g), 2) ** 2
    if epsilon is None:
        epsilon = default_epsilon(e2, field.jump_length())
    return ModificationResult(modified, rects, mu_t, tuple(motions), float(epsilon))


def _interior_v(F: np.ndarray) -> np.ndarray:
    return F[:-1, :] & F[1:, :]


def _interior_h(F: np.ndarray) -> np.ndarray:
    return F[:, :-1] & F[:, 1:]


def modify(field: DisplacementField, fit_margin: int = 2, epsilon=None, lam: float = 1.0) -> ModificationResult:
    """Cover the jump set and in-fill: the usual front door."""
    e2 = lp_norm(strain(field), RegionMask.full(field.grid), 2) ** 2
    rects = cover_cracks(field.grid, field.jump_edges(), e2, epsilon, lam)
    return apply_modification(field, rects, fit_margin, epsilon)


@dataclass(frozen=True)
class JumpControl:
    passed: bool
    ratio: float
    lhs_sq: float
    rhs: float


def jump_control_check(
    result: ModificationResult, mask: RegionMask, epsilon: float | None = None,
    C_probe: float = 1.0, c: float = 2.0,
) -> JumpControl:
    """Compare (|E u|(D))^2 with c|D| ||e||^2_D + C eps H1(D cap J) sum_{R in R(D)} d(R)^2."""
    f = result.modified
    g = f.grid
    eps = result.epsilon if epsilon is None else epsilon
    lhs = total_ed_variation(f, mask) ** 2
    e2 = lp_norm(strain(f), mask, 2) ** 2
    jv, jh = f.jump_edges()
    m = mask.cells
    # same edge ownership as the variation: minus-side cell in the mask
    h1 = g.h * float((jv & m[:-1, :]).sum() + (jh & m[:, :-1]).sum())
    dsq = 0.0
    for r in result.rects.rects:
        if _closure_meets(r, m, g.n):
            dsq += r.diameter(g.h) ** 2
    rhs = c * mask.area * e2 + C_probe * eps * h1 * dsq
    ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else np.inf)
    return JumpControl(bool(lhs <= rhs * (1 + 1e-12) or lhs == 0.0), float(ratio), float(lhs), float(rhs))


def _closure_meets(r: Rect, m: np.ndarray, n: int) -> bool:
    """Does some mask cell, taken closed, share a point with the closed rectangle?"""
    return bool(m[max(r.i0 - 1, 0):min(r.i1 + 1, n), max(r.j0 - 1, 0):min(r.j1 + 1, n)].any())
