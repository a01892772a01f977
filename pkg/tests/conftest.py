import numpy as np
import pytest

from krecycle.problems import stencil_offsets
from krecycle.sparse import GridShape, StencilMatrix


def _grid(shape):
    k, j, i = np.meshgrid(np.arange(shape.nz), np.arange(shape.ny), np.arange(shape.nx), indexing="ij")
    return i.ravel(), j.ravel(), k.ravel()


def random_stencil(shape: GridShape, rng, dominance: float = 1.0, symmetric: bool = False) -> StencilMatrix:
    """Random 5/7-point matrix with negative couplings and a dominant diagonal.

    ``dominance >= 1`` gives a nonsingular M-matrix; ``symmetric`` mirrors
    each coupling onto the opposite band so the dense expansion is symmetric.
    """
    offs = stencil_offsets(shape)
    idx = _grid(shape)
    bands = np.zeros((len(offs), shape.N))
    for d, o in enumerate(offs[1:], start=1):
        ok = np.ones(shape.N, dtype=bool)
        for c, step, n in zip(idx, o, shape.dims):
            ok &= (c + step >= 0) & (c + step < n)
        if symmetric and sum(o) < 0:
            continue
        w = np.where(ok, -rng.uniform(0.2, 1.0, shape.N), 0.0)
        bands[d] = w
        if symmetric:
            mirror = offs.index(tuple(-c for c in o))
            shift = o[0] + shape.nx * (o[1] + shape.ny * o[2])
            src = np.flatnonzero(ok)
            bands[mirror][src + shift] = w[src]
    bands[0] = dominance * np.abs(bands[1:]).sum(axis=0) + 0.1
    return StencilMatrix(shape, offs, bands)


def random_shape(rng, max_n=1024):
    while True:
        nx, ny = rng.integers(3, 33, size=2)
        if nx * ny <= max_n:
            return GridShape(int(nx), int(ny))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    """Keep one PASS/FAIL line per acceptance criterion for the run summary."""
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
