import numpy as np
import pytest

from krecycle.flow import FlowError, FlowParams, FractionalStepDriver, fractional_step_sequence
from krecycle.precond import PreconditionerSpec, SystemOperator
from krecycle.solvers import SolverConfig, gmres_m
from krecycle.sparse import GridShape, to_dense


def iterative_pressure(A, b):
    op = SystemOperator(A, PreconditionerSpec("jacobi"), "left")
    x, rep = gmres_m(op, op.rhs(b), None, SolverConfig(m=40, tol=1e-10, max_itn=20000))
    assert np.linalg.norm(b - A.dot(x)) <= 1e-9 * max(np.linalg.norm(b), 1e-300) or not np.any(b)
    return x


def test_quiescent_flow_gives_zero_rhs():
    seq = fractional_step_sequence(GridShape(16, 8), 5, forcing=0.0, perturbation=0.0)
    assert len(seq) == 5 and all(not np.any(b) for b in seq.rhs)


def test_channel_rhs_decays():
    seq = fractional_step_sequence(GridShape(32, 16), 30)
    n = [np.linalg.norm(b) for b in seq.rhs]
    assert n[0] > n[-1]


@pytest.mark.parametrize("geometry", ["channel", "porous"])
def test_continuity_after_correction(geometry):
    seq = fractional_step_sequence(GridShape(24, 12), 6, geometry=geometry, solver=iterative_pressure)
    for before, after in seq.meta["divergence"]:
        assert after <= 1e-8 * before


def test_matrix_fixed_and_anchored():
    drv = FractionalStepDriver(FlowParams(nx=12, ny=6, steps=3))
    A = drv.A
    seq = fractional_step_sequence(GridShape(12, 6), 3)
    assert np.array_equal(seq.A.bands, A.bands) and seq.matrix_epoch == 0
    D = to_dense(A)
    assert np.linalg.norm(D - D.T) == 0.0
    np.linalg.cholesky(D)
    for b in seq.rhs:
        assert b[drv.anchor] == 0.0


def test_porous_geometry_solid_cells():
    drv = FractionalStepDriver(FlowParams(nx=16, ny=8, geometry="porous", porosity=0.8, seed=2))
    solid = drv.solid.ravel()
    assert solid.any()
    D = to_dense(drv.A)
    for s in np.flatnonzero(solid):
        assert D[s, s] == 1.0 and np.count_nonzero(D[s]) == 1
    for b in fractional_step_sequence(GridShape(16, 8), 3, geometry="porous", seed=2).rhs:
        assert not np.any(b[solid])


def test_deterministic():
    a = fractional_step_sequence(GridShape(16, 8), 4, seed=7)
    b = fractional_step_sequence(GridShape(16, 8), 4, seed=7)
    assert all(np.array_equal(x, y) for x, y in zip(a.rhs, b.rhs))


def test_cfl_guard_names_step():
    with pytest.raises(FlowError, match="step 1"):
        fractional_step_sequence(GridShape(16, 8), 3, dt=1.0)


def test_unknown_geometry():
    with pytest.raises(ValueError):
        FractionalStepDriver(FlowParams(geometry="pipe"))


def test_stream_uses_sent_solution():
    drv = FractionalStepDriver(FlowParams(nx=12, ny=6, steps=2))
    gen = drv.stream()
    b = next(gen)
    gen.send(drv.reference_solve(b))
    assert drv.step_index == 1
    with pytest.raises(StopIteration):
        gen.send(None)
    assert drv.step_index == 2
