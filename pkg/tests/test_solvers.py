import numpy as np
import pytest

from conftest import random_stencil
from krecycle.precond import PreconditionerSpec, SystemOperator
from krecycle.problems import make_convection_diffusion, make_poisson
from krecycle.solvers import (
    SolverConfig,
    arnoldi_cycle,
    bicgstab,
    bicgstab_storage,
    gmres_m,
    gmres_storage,
    threshold,
)
from krecycle.sparse import GridShape, matvec_count, to_dense


def gmres_predicted(rep):
    return rep.initial_matvecs + sum(s + 1 for s in rep.cycle_steps)


def test_config_validation():
    for kw in ({"tol": 0.0}, {"tol_mode": "loose"}, {"m": 0}, {"max_itn": 0}, {"shadow_choice": "zero"}):
        with pytest.raises(ValueError):
            SolverConfig(**kw)
    assert threshold(SolverConfig(tol=1e-3), 10.0) == pytest.approx(1e-2)
    assert threshold(SolverConfig(tol=1e-3, tol_mode="absolute"), 10.0) == 1e-3


def test_gmres_identity(rng):
    b = rng.standard_normal(20)
    x, rep = gmres_m(np.eye(20), b, None, SolverConfig(m=5, tol=1e-12))
    assert rep.converged and rep.iterations == 1
    np.testing.assert_allclose(x, b, rtol=1e-15)
    hist = [h.norm for h in rep.residual_history]
    assert hist[0] == pytest.approx(np.linalg.norm(b)) and hist[-1] <= 1e-15
    assert rep.residual_history[0].matvecs == 0


def test_gmres_full_krylov_single_cycle():
    A = make_poisson(GridShape(8))
    b = np.arange(1.0, 9.0)
    x, rep = gmres_m(A, b, None, SolverConfig(m=8, tol=1e-12))
    assert rep.converged and rep.iterations == 1
    np.testing.assert_allclose(to_dense(A) @ x, b, atol=1e-11)


def test_gmres_poisson_matches_dense_lu():
    A = make_poisson(GridShape(16, 16))
    b = np.ones(A.N)
    x, rep = gmres_m(A, b, None, SolverConfig(m=10, tol=1e-8, max_itn=20000))
    xs = np.linalg.solve(to_dense(A), b)
    assert rep.converged
    assert np.linalg.norm(x - xs) / np.linalg.norm(xs) <= 1e-6
    assert rep.matvecs == gmres_predicted(rep)


@pytest.mark.parametrize("seed", range(5))
def test_gmres_optimality_one_cycle(seed):
    rng = np.random.default_rng(seed)
    A = random_stencil(GridShape(8, 8), rng, dominance=0.6)
    b = rng.standard_normal(A.N)
    _, rep = gmres_m(A, b, None, SolverConfig(m=64, tol=1e-14, max_itn=65))
    assert rep.residual_history[1].norm <= 1e-10 * np.linalg.norm(b)


@pytest.mark.parametrize("seed", range(10))
def test_arnoldi_invariants_each_cycle(seed):
    rng = np.random.default_rng(seed)
    A = random_stencil(GridShape(12, 10), rng, dominance=0.9)
    D = to_dense(A)
    a_est = np.linalg.norm(D, 1)
    b = rng.standard_normal(A.N)
    checks = []

    def inspect(cyc):
        V = cyc.V
        orth = np.linalg.norm(V.T @ V - np.eye(V.shape[1]))
        rel = np.linalg.norm(D @ cyc.Vm - V @ cyc.H)
        checks.append((orth, rel))

    gmres_m(A, b, None, SolverConfig(m=15, tol=1e-10, max_itn=300), inspect=inspect)
    assert checks
    for orth, rel in checks:
        assert orth <= 1e-10
        assert rel <= 1e-10 * a_est


@pytest.mark.parametrize("seed", range(10))
def test_gmres_monotone_and_accounting(seed):
    rng = np.random.default_rng(seed)
    A = random_stencil(GridShape(10, 10), rng, dominance=0.8)
    b = rng.standard_normal(A.N)
    c0 = matvec_count()
    _, rep = gmres_m(A, b, None, SolverConfig(m=8, tol=1e-10, max_itn=2000))
    assert matvec_count() - c0 == rep.matvecs == gmres_predicted(rep)
    h = [e.norm for e in rep.residual_history]
    assert all(h[i + 1] <= h[i] * (1 + 1e-12) for i in range(len(h) - 1))
    # estimates are recorded per Arnoldi step
    assert len(rep.estimates) == sum(rep.cycle_steps)


def test_gmres_nonzero_initial_guess_costs_one_matvec(rng):
    A = make_poisson(GridShape(6, 6))
    b = rng.standard_normal(A.N)
    _, rep = gmres_m(A, b, rng.standard_normal(A.N), SolverConfig(m=10, tol=1e-10))
    assert rep.initial_matvecs == 1 and rep.matvecs == gmres_predicted(rep)


def test_happy_breakdown_ends_cycle_early():
    # three distinct eigenvalues: the Krylov space is exhausted after 3 steps
    d = np.repeat([1.0, 2.0, 5.0], 10)
    b = np.ones(30)
    x, rep = gmres_m(np.diag(d), b, None, SolverConfig(m=20, tol=1e-12))
    assert rep.converged and rep.cycle_steps == (3,)
    np.testing.assert_allclose(x, b / d, rtol=1e-12)


def test_arnoldi_cycle_reports_happy_flag():
    cyc = arnoldi_cycle(lambda v: 2.0 * v, np.ones(5), np.sqrt(5.0), 4)
    assert cyc.happy and cyc.steps == 1
    np.testing.assert_allclose(cyc.Vm @ cyc.y, np.full(5, 0.5))


def test_gmres_max_iterations_and_stagnation():
    n = 12
    shift = lambda v: np.roll(v, 1)  # noqa: E731
    b = np.zeros(n)
    b[0] = 1.0
    # a cyclic shift makes restarted GMRES(m < n) stall completely
    _, rep = gmres_m(shift, b, None, SolverConfig(m=4, tol=1e-8, max_itn=60))
    assert rep.status == "stagnation" and "stagnation" in rep.flags
    _, rep = gmres_m(make_poisson(GridShape(20, 20)), np.ones(400), None, SolverConfig(m=5, tol=1e-12, max_itn=30))
    assert rep.status == "max_iterations"
    assert rep.matvecs == 30


def test_gmres_zero_rhs():
    x, rep = gmres_m(np.eye(4), np.zeros(4), None, SolverConfig())
    assert rep.converged and rep.matvecs == 0 and not np.any(x)


def test_bicgstab_identity_half_step_exit(rng):
    b = rng.standard_normal(30)
    x, rep = bicgstab(np.eye(30), b, None, SolverConfig(tol=1e-12))
    assert rep.converged and rep.iterations == 1 and rep.matvecs == 1
    np.testing.assert_allclose(x, b, rtol=1e-15)


def test_bicgstab_forced_rho_breakdown(rng):
    A = make_poisson(GridShape(6, 6))
    b = rng.standard_normal(A.N)
    shadow = np.random.default_rng(7).standard_normal(A.N)
    shadow -= (shadow @ b) / (b @ b) * b
    _, rep = bicgstab(A, b, None, SolverConfig(), shadow=shadow)
    assert rep.status == "breakdown" and rep.flags == ("rho",) and rep.matvecs == 0


def test_bicgstab_random_shadow_is_seeded(rng):
    A = make_convection_diffusion(GridShape(8, 8), 1.0)
    b = rng.standard_normal(A.N)
    cfg = SolverConfig(shadow_choice="random", seed=3, tol=1e-10)
    x1, r1 = bicgstab(A, b, None, cfg)
    x2, r2 = bicgstab(A, b, None, cfg)
    assert r1.converged and np.array_equal(x1, x2) and r1.matvecs == r2.matvecs


@pytest.mark.parametrize("kind", ["jacobi", "ssor"])
def test_bicgstab_convdiff_matches_dense_lu(rng, kind):
    A = make_convection_diffusion(GridShape(16, 16), 2.0, (1.0, 0.3))
    op = SystemOperator(A, PreconditionerSpec(kind), "right")
    b = rng.standard_normal(A.N)
    y, rep = bicgstab(op, b, None, SolverConfig(tol=1e-8, max_itn=4000))
    x = op.solution(y)
    xs = np.linalg.solve(to_dense(A), b)
    assert rep.converged
    assert np.linalg.norm(x - xs) / np.linalg.norm(xs) <= 1e-6
    # the residual is the true residual of the unpreconditioned system
    assert abs(np.linalg.norm(b - A.dot(x)) - rep.final_residual_norm) <= 1e-8 * np.linalg.norm(b)


@pytest.mark.parametrize("seed", range(10))
def test_bicgstab_accounting(seed):
    rng = np.random.default_rng(seed)
    A = random_stencil(GridShape(10, 9), rng, dominance=0.9)
    b = rng.standard_normal(A.N)
    c0 = matvec_count()
    _, rep = bicgstab(A, b, None, SolverConfig(tol=1e-9, max_itn=3000))
    assert matvec_count() - c0 == rep.matvecs
    assert rep.matvecs in (2 * rep.iterations, 2 * rep.iterations - 1)
    assert rep.matvecs == sum(rep.cycle_steps)


def test_bicgstab_max_iterations(rng):
    A = make_poisson(GridShape(20, 20))
    _, rep = bicgstab(A, rng.standard_normal(A.N), None, SolverConfig(tol=1e-14, max_itn=10))
    assert rep.status == "max_iterations" and rep.matvecs == 10


def test_bicgstab_divergence_abort():
    # x^T A x ~ 0 makes the first step length huge
    n = 40
    S = np.diag(np.ones(n - 1), 1) - np.diag(np.ones(n - 1), -1)
    A = 0.5 * S + 1e-6 * np.eye(n)
    b = np.random.default_rng(0).standard_normal(n)
    _, rep = bicgstab(A, b, None, SolverConfig(tol=1e-10), divergence_factor=1e4)
    assert rep.status == "breakdown" and rep.flags == ("diverged",)
    assert max(h.norm for h in rep.residual_history) > 1e4 * np.linalg.norm(b)


def test_storage_formulas():
    assert bicgstab_storage() == 8
    for m in (1, 10, 30, 50):
        assert gmres_storage(m) == m + 5
    _, rep = gmres_m(np.eye(5), np.ones(5), None, SolverConfig(m=7))
    assert rep.storage == 12
    _, rep = bicgstab(np.eye(5), np.ones(5))
    assert rep.storage == 8
