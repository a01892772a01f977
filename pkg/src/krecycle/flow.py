"""Toy 2D fractional-step channel flow producing pressure-Poisson sequences.

Staggered grid with x periodic and no-slip walls at ``y = 0, 1``:
``u[j, i]`` lives on the left face of cell ``(i, j)``, ``v[j, i]`` on its
bottom face (``v`` has ``ny + 1`` rows, the outer ones fixed at zero).
Each step takes an explicit Adams-Bashforth predictor, assembles
``b = -h^2 div(u~) / dt`` and corrects ``u = u~ - dt grad p``.  The pressure
matrix is the Neumann Laplacian ``-h^2 Δ`` with one anchored cell and never
changes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import splu

from .problems import SystemSequence, _assemble, random_solid
from .sparse import GridShape, to_csr

__all__ = ["FlowError", "FlowParams", "FractionalStepDriver", "fractional_step_sequence"]


class FlowError(RuntimeError):
    pass


@dataclass(frozen=True)
class FlowParams:
    nx: int = 32
    ny: int = 16
    dt: float = 2e-3
    nu: float = 1e-2
    forcing: float = 1.0
    geometry: str = "channel"
    porosity: float = 0.8
    perturbation: float = 0.05
    seed: int = 0
    steps: int = 30

    @property
    def h(self) -> float:
        return 1.0 / self.ny


def _xp(a):
    return np.roll(a, -1, axis=1)


def _xm(a):
    return np.roll(a, 1, axis=1)


class FractionalStepDriver:
    """Advance the toy flow one step at a time.

    Use :meth:`stream` as a coroutine: each ``next``/``send`` returns the
    pressure right-hand side of the next step, and the value sent back is
    the pressure solution used for the correction (``None`` means solve it
    internally with a sparse LU factorization).
    """

    def __init__(self, params: FlowParams):
        p = self.params = params
        shape = GridShape(p.nx, p.ny)
        if p.geometry == "channel":
            solid = np.zeros(shape.N, dtype=bool)
        elif p.geometry == "porous":
            solid = random_solid(shape, p.porosity, p.seed, wrap_x=True)
        else:
            raise ValueError(f"unknown geometry {p.geometry!r}")
        self.solid = solid.reshape(p.ny, p.nx)
        self.A = _assemble(shape, "channel", solid=solid, solid_bc="neumann")
        self.anchor = self.A.meta["anchor"]
        fluid = ~self.solid
        self.u_open = fluid & _xm(fluid)
        self.v_open = np.zeros((p.ny + 1, p.nx), dtype=bool)
        self.v_open[1:-1] = fluid[1:] & fluid[:-1]
        self.u, self.v = self._initial_velocity()
        self._F_old = None
        self._lu = None
        self.step_index = 0
        self.divergence_log: list[tuple[float, float]] = []

    def _initial_velocity(self):
        p = self.params
        h = p.h
        if p.perturbation == 0.0:
            return np.zeros((p.ny, p.nx)), np.zeros((p.ny + 1, p.nx))
        rng = np.random.default_rng(p.seed)
        Lx = p.nx * h
        xu, yu = np.meshgrid(np.arange(p.nx) * h, (np.arange(p.ny) + 0.5) * h)
        xv, yv = np.meshgrid((np.arange(p.nx) + 0.5) * h, np.arange(p.ny + 1) * h)
        u = np.zeros_like(xu)
        v = np.zeros_like(xv)
        # streamfunction psi = a sin^2(pi y) sin(kx + phi), sampled pointwise
        for kx in range(1, 4):
            a, phi = rng.standard_normal(), rng.uniform(0, 2 * np.pi)
            k = 2 * np.pi * kx / Lx
            u += a * 2 * np.pi * np.sin(np.pi * yu) * np.cos(np.pi * yu) * np.sin(k * xu + phi)
            v -= a * k * np.sin(np.pi * yv) ** 2 * np.cos(k * xv + phi)
        scale = p.perturbation / max(np.abs(u).max(), np.abs(v).max())
        return u * scale * self.u_open, v * scale * self.v_open

    def _tendency(self, u, v):
        p = self.params
        h, nu = p.h, p.nu
        # u ghosts for the no-slip walls
        ug = np.vstack([-u[:1], u, -u[-1:]])
        dudx = (_xp(u) - _xm(u)) / (2 * h)
        dudy = (ug[2:] - ug[:-2]) / (2 * h)
        vbar = 0.25 * (v[:-1] + _xm(v[:-1]) + v[1:] + _xm(v[1:]))
        lap_u = (_xp(u) + _xm(u) + ug[2:] + ug[:-2] - 4 * u) / h**2
        Fu = -(u * dudx + vbar * dudy) + nu * lap_u + p.forcing
        vi = v[1:-1]
        dvdx = (_xp(vi) - _xm(vi)) / (2 * h)
        dvdy = (v[2:] - v[:-2]) / (2 * h)
        ubar = 0.25 * (u[:-1] + _xp(u[:-1]) + u[1:] + _xp(u[1:]))
        lap_v = (_xp(vi) + _xm(vi) + v[2:] + v[:-2] - 4 * vi) / h**2
        Fv = np.zeros_like(v)
        Fv[1:-1] = -(ubar * dvdx + vi * dvdy) + nu * lap_v
        return Fu, Fv

    def divergence(self, u, v) -> np.ndarray:
        """Cell divergence ``(u_E - u_W + v_N - v_S) / h`` (zero in solids)."""
        d = (_xp(u) - u + v[1:] - v[:-1]) / self.params.h
        d[self.solid] = 0.0
        return d

    def _check_cfl(self, u, v, step):
        p = self.params
        cfl = max(np.abs(u).max(), np.abs(v).max()) * p.dt / p.h
        if not np.isfinite(cfl) or cfl > 1.0:
            raise FlowError(f"CFL condition violated at step {step}: CFL = {cfl:.3g}")

    def predict(self) -> np.ndarray:
        """Predictor for the next step; returns the pressure right-hand side."""
        p = self.params
        self._check_cfl(self.u, self.v, self.step_index + 1)
        Fu, Fv = self._tendency(self.u, self.v)
        if self._F_old is None:
            du, dv = Fu, Fv
        else:
            du, dv = 1.5 * Fu - 0.5 * self._F_old[0], 1.5 * Fv - 0.5 * self._F_old[1]
        self._F_old = (Fu, Fv)
        self.ut = (self.u + p.dt * du) * self.u_open
        self.vt = (self.v + p.dt * dv) * self.v_open
        self._check_cfl(self.ut, self.vt, self.step_index + 1)
        b = (-p.h**2 / p.dt) * self.divergence(self.ut, self.vt)
        b = b.ravel()
        b[self.anchor] = 0.0
        return b

    def reference_solve(self, b: np.ndarray) -> np.ndarray:
        if self._lu is None:
            self._lu = splu(to_csr(self.A).tocsc())
        return self._lu.solve(b)

    def correct(self, pressure: np.ndarray) -> None:
        p = self.params
        P = np.asarray(pressure, dtype=np.float64).reshape(p.ny, p.nx)
        g = p.dt / p.h
        self.u = self.ut - g * (P - _xm(P)) * self.u_open
        v = self.vt.copy()
        v[1:-1] -= g * (P[1:] - P[:-1])
        self.v = v * self.v_open
        before = float(np.linalg.norm(self.divergence(self.ut, self.vt)))
        after = float(np.linalg.norm(self.divergence(self.u, self.v)))
        self.divergence_log.append((before, after))
        self.step_index += 1

    def stream(self, steps: int | None = None):
        for _ in range(self.params.steps if steps is None else steps):
            b = self.predict()
            sol = yield b
            self.correct(self.reference_solve(b) if sol is None else sol)


def fractional_step_sequence(shape: GridShape, steps: int, dt: float = 2e-3, nu: float = 1e-2, forcing: float = 1.0,
                             geometry: str = "channel", porosity: float = 0.8, seed: int = 0,
                             perturbation: float = 0.05, solver=None) -> SystemSequence:
    """Run the driver for ``steps`` steps and record the pressure systems.

    ``solver(A, b) -> p`` replaces the internal sparse LU pressure solve.
    The sequence metadata carries the per-step divergence norms before and
    after correction.
    """
    params = FlowParams(shape.nx, shape.ny, dt, nu, forcing, geometry, porosity, perturbation, seed, steps)
    drv = FractionalStepDriver(params)
    gen = drv.stream()
    rhs = []
    try:
        b = next(gen)
        while True:
            rhs.append(b)
            sol = None if solver is None else solver(drv.A, b)
            b = gen.send(sol)
    except StopIteration:
        pass
    meta = {
        "generator": "fractional_step",
        "geometry": geometry,
        "seed": seed,
        "dt": dt,
        "nu": nu,
        "forcing": forcing,
        "porosity": porosity if geometry == "porous" else 1.0,
        "divergence": drv.divergence_log,
    }
    return SystemSequence(drv.A, rhs, meta=meta)
