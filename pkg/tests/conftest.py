import numpy as np
import pytest

from kornforge.field import CrackSet, Grid, Segment, build_field, piecewise_sampler, rigid_sampler
from kornforge.rigid import RigidMotion


def box_crack(x0, x1, y0, y1) -> CrackSet:
    return CrackSet((Segment("x", y0, x0, x1), Segment("x", y1, x0, x1),
                     Segment("y", x0, y0, y1), Segment("y", x1, y0, y1)))


def two_body(grid: Grid, box, inner: RigidMotion, outer: RigidMotion):
    """Outer rigid motion everywhere, inner one on the open box, crack on the box boundary."""
    x0, x1, y0, y1 = box

    def label(c):
        return ((c[..., 0] > x0) & (c[..., 0] < x1) & (c[..., 1] > y0) & (c[..., 1] < y1)).astype(int)

    samp = piecewise_sampler(label, [rigid_sampler(outer.omega, outer.b), rigid_sampler(inner.omega, inner.b)])
    return build_field(grid, box_crack(x0, x1, y0, y1), samp)


@pytest.fixture
def grid16():
    return Grid((0.0, 0.0), 1.0, 16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record the one-line verdict of an acceptance criterion."""

    def record(k: int, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} criterion {k}: {detail}"
        _ACCEPTANCE_LINES[k] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(_ACCEPTANCE_LINES[k])
