"""Restarted GMRES and BiCGStab with cycle-granularity convergence checks.

Convergence is tested only at the end of a full GMRES cycle or a full
BiCGStab loop body (plus BiCGStab's half-step early exit).  ``max_itn`` is a
cap on matrix-vector products: a new cycle or iteration starts only while
fewer than ``max_itn`` products have been spent.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np
from scipy.linalg import solve_triangular

from .sparse import StencilMatrix, matvec, DimensionError

__all__ = [
    "SolverConfig",
    "SolveReport",
    "HistoryEntry",
    "CycleData",
    "Workspace",
    "gmres_m",
    "bicgstab",
    "arnoldi_cycle",
    "threshold",
    "as_operator",
    "gmres_storage",
    "bicgstab_storage",
]

CONVERGED = "converged"
MAX_ITERATIONS = "max_iterations"
BREAKDOWN = "breakdown"
STAGNATION = "stagnation"

# relative cosine below which a bi-Lanczos inner product counts as zero
BREAKDOWN_TOL = 1e-15
# ||v_{j+1}|| below this fraction of ||A v_j|| is an exact (happy) breakdown
HAPPY_TOL = 1e-14
REORTH_RATIO = 0.7
STAGNATION_CYCLES = 5
STAGNATION_FACTOR = 1.0 - 1e-12


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-8
    tol_mode: str = "relative"
    max_itn: int = 1000
    m: int = 30
    shadow_choice: str = "initial_residual"
    seed: int = 0

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.tol_mode not in ("absolute", "relative"):
            raise ValueError(f"tol_mode must be absolute or relative, got {self.tol_mode!r}")
        if self.m < 1 or self.max_itn < 1:
            raise ValueError("m and max_itn must be >= 1")
        if self.shadow_choice not in ("initial_residual", "random"):
            raise ValueError(f"unknown shadow_choice {self.shadow_choice!r}")

    def replace(self, **kw) -> "SolverConfig":
        return replace(self, **kw)


def threshold(cfg: SolverConfig, bnorm: float) -> float:
    return cfg.tol * bnorm if cfg.tol_mode == "relative" else cfg.tol


class HistoryEntry(NamedTuple):
    matvecs: int
    norm: float
    seconds: float


@dataclass
class SolveReport:
    """Outcome of one linear solve.

    ``residual_history`` holds one entry per convergence check (cycle end or
    BiCGStab loop body), starting with the initial residual at 0 matvecs.
    ``estimates`` holds the per-step Givens residual estimates of GMRES-type
    methods; they are informational and never used for convergence.
    ``cycle_steps`` lists the Arnoldi steps of each GMRES-type cycle, or the
    matvecs (1 or 2) of each BiCGStab iteration.
    """

    method: str
    status: str
    matvecs: int
    iterations: int
    residual_history: list
    wall_time: float
    final_residual_norm: float
    initial_residual_norm: float
    threshold: float
    residual_kind: str = "true"
    cycle_steps: tuple = ()
    setup_matvecs: int = 0
    initial_matvecs: int = 0
    storage: int = 0
    flags: tuple = ()
    estimates: list = field(default_factory=list)
    updated_residual_norm: float | None = None
    final_check_matvecs: int = 0

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    @property
    def cycles_or_iterations(self) -> int:
        return self.iterations


class Workspace:
    """Ledger of solver storage in units of length-N vectors.

    Only persistent O(N) storage beyond the matrix, right-hand side and
    approximate solution is counted.
    """

    def __init__(self, N: int):
        self.N = N
        self.layout: dict[str, int] = {}

    def vector(self, name: str) -> np.ndarray:
        self.layout[name] = 1
        return np.zeros(self.N)

    def block(self, name: str, cols: int) -> np.ndarray:
        self.layout[name] = cols
        return np.zeros((self.N, cols))

    def reserve(self, name: str, cols: int) -> None:
        """Account for storage owned by another object (e.g. a recycle space)."""
        self.layout[name] = cols

    @property
    def units(self) -> int:
        return sum(self.layout.values())


def gmres_storage(m: int) -> int:
    return (m + 1) + 4


BICGSTAB_VECTORS = ("r", "r_shadow", "p", "v", "s", "t", "Mp", "Ms")


def bicgstab_storage() -> int:
    return len(BICGSTAB_VECTORS)


def bicgstab_workspace(N: int) -> Workspace:
    ws = Workspace(N)
    for name in BICGSTAB_VECTORS:
        ws.reserve(name, 1)
    return ws


class _Counted:
    def __init__(self, op):
        self.op = op
        self.n = 0

    def __call__(self, v):
        self.n += 1
        return self.op(v)


def as_operator(A) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap a :class:`StencilMatrix` so that each call is a counted matvec."""
    if isinstance(A, StencilMatrix):
        return lambda v: matvec(A, v)
    if isinstance(A, np.ndarray):
        return lambda v: A @ v
    if callable(A):
        return A
    raise TypeError(f"cannot use {type(A).__name__} as a linear operator")


def _check_rhs(b, x0):
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 1:
        raise DimensionError("right-hand side must be a vector")
    if x0 is not None:
        x0 = np.asarray(x0, dtype=np.float64)
        if x0.shape != b.shape:
            raise DimensionError(f"x0 of shape {x0.shape} does not match b {b.shape}")
    return b, x0


def _initial(op: _Counted, b, x0):
    if x0 is None or not np.any(x0):
        return np.zeros_like(b), b.copy()
    return x0.copy(), b - op(x0)


@dataclass
class CycleData:
    """One (augmented) Arnoldi cycle: ``A V[:, :s] = C B + V H``.

    ``V`` has ``s + 1`` columns, or ``s`` after a happy breakdown (``H`` is
    then square).
    """

    V: np.ndarray
    H: np.ndarray
    B: np.ndarray
    y: np.ndarray
    rho: float
    steps: int
    happy: bool

    @property
    def Vm(self) -> np.ndarray:
        return self.V[:, : self.steps]


def arnoldi_cycle(op, r, rho, m, C=None, V=None, on_step=None) -> CycleData:
    """Run up to ``m`` (augmented) Arnoldi steps from ``v_1 = r / rho``.

    New vectors are orthogonalized against the columns of ``C`` first and
    then against ``v_1 .. v_j`` with modified Gram-Schmidt, with one
    reorthogonalization pass when cancellation is severe.  The small
    least-squares problem is reduced with Givens rotations as it grows;
    ``on_step(j, estimate)`` receives the residual-norm estimate after each
    step.
    """
    N = r.shape[0]
    k = 0 if C is None else C.shape[1]
    if V is None:
        V = np.zeros((N, m + 1))
    H = np.zeros((m + 1, m))
    B = np.zeros((k, m))
    Rg = np.zeros((m + 1, m))
    cs = np.zeros(m)
    sn = np.zeros(m)
    g = np.zeros(m + 1)
    g[0] = rho
    V[:, 0] = r / rho
    steps, happy = m, False
    for j in range(m):
        w = op(V[:, j])
        pre = np.linalg.norm(w)
        for _ in range(2):
            for l in range(k):
                c = C[:, l]
                t = c @ w
                B[l, j] += t
                w -= t * c
            for l in range(j + 1):
                t = V[:, l] @ w
                H[l, j] += t
                w -= t * V[:, l]
            h = np.linalg.norm(w)
            if h >= REORTH_RATIO * pre:
                break
        H[j + 1, j] = h
        # Givens reduction of the new column
        col = H[: j + 2, j].copy()
        for i in range(j):
            col[i], col[i + 1] = cs[i] * col[i] + sn[i] * col[i + 1], -sn[i] * col[i] + cs[i] * col[i + 1]
        d = np.hypot(col[j], col[j + 1])
        if d == 0.0:
            cs[j], sn[j] = 1.0, 0.0
        else:
            cs[j], sn[j] = col[j] / d, col[j + 1] / d
        col[j], col[j + 1] = d, 0.0
        Rg[: j + 2, j] = col
        g[j], g[j + 1] = cs[j] * g[j], -sn[j] * g[j]
        if on_step is not None:
            on_step(j, abs(g[j + 1]))
        if h <= HAPPY_TOL * pre:
            steps, happy = j + 1, True
            H[j + 1, j] = 0.0
            break
        V[:, j + 1] = w / h
    Rs = Rg[:steps, :steps]
    if np.all(np.abs(np.diag(Rs)) > 0.0):
        y = solve_triangular(Rs, g[:steps])
    else:
        y = np.linalg.lstsq(H[: steps + 1, :steps], rho * np.eye(steps + 1)[0], rcond=None)[0]
    # after a happy breakdown v_{s+1} does not exist: A V_s = C B + V_s H_s
    rows = steps if happy else steps + 1
    return CycleData(V[:, :rows], H[:rows, :steps], B[:, :steps], y, rho, steps, happy)


def _stagnated(history) -> bool:
    if len(history) < STAGNATION_CYCLES + 1:
        return False
    tail = [h.norm for h in history[-(STAGNATION_CYCLES + 1):]]
    return all(tail[i + 1] > tail[i] * STAGNATION_FACTOR for i in range(STAGNATION_CYCLES))


def gmres_m(A_op, b, x0=None, cfg: SolverConfig = SolverConfig(), inspect=None, residual_kind="true"):
    """Restarted GMRES(m).

    Parameters
    ----------
    A_op : StencilMatrix or callable
        The (already preconditioned) operator; every call is one matvec.
    b : array
        Right-hand side of the iterated system.
    x0 : array, optional
        Initial guess; a zero or missing guess costs no matvec.
    cfg : SolverConfig
    inspect : callable, optional
        Called as ``inspect(cycle_data)`` after every cycle.

    Returns
    -------
    x, SolveReport
    """
    t0 = time.perf_counter()
    b, x0 = _check_rhs(b, x0)
    op = _Counted(as_operator(A_op))
    m = cfg.m
    ws = Workspace(b.size)
    V = ws.block("V", m + 1)
    for name in ("r", "w", "op_work", "Vy"):
        ws.reserve(name, 1)
    x, r = _initial(op, b, x0)
    init_mv = op.n
    bnorm = np.linalg.norm(b)
    thresh = threshold(cfg, bnorm)
    rho = np.linalg.norm(r)
    history = [HistoryEntry(op.n, rho, 0.0)]
    estimates = []
    steps_log = []
    flags = ()
    while rho > thresh and op.n < cfg.max_itn:
        base = op.n
        cyc = arnoldi_cycle(
            op, r, rho, m, V=V,
            on_step=lambda j, e: estimates.append(HistoryEntry(base + j + 1, e, time.perf_counter() - t0)),
        )
        x += cyc.Vm @ cyc.y
        r = b - op(x)
        rho = np.linalg.norm(r)
        steps_log.append(cyc.steps)
        history.append(HistoryEntry(op.n, rho, time.perf_counter() - t0))
        if inspect is not None:
            inspect(cyc)
    if rho <= thresh:
        status = CONVERGED
    elif _stagnated(history):
        status, flags = STAGNATION, ("stagnation",)
    else:
        status = MAX_ITERATIONS
    return x, SolveReport(
        method="gmres",
        status=status,
        matvecs=op.n,
        iterations=len(steps_log),
        residual_history=history,
        wall_time=time.perf_counter() - t0,
        final_residual_norm=rho,
        initial_residual_norm=history[0].norm,
        threshold=thresh,
        residual_kind=residual_kind,
        cycle_steps=tuple(steps_log),
        initial_matvecs=init_mv,
        storage=ws.units,
        flags=flags,
        estimates=estimates,
    )


def make_shadow(cfg: SolverConfig, r0: np.ndarray) -> np.ndarray:
    if cfg.shadow_choice == "initial_residual":
        return r0.copy()
    return np.random.default_rng(cfg.seed).standard_normal(r0.size)


@dataclass
class _BiCGState:
    x: np.ndarray
    r: np.ndarray
    iterations: int = 0
    status: str = MAX_ITERATIONS
    flags: tuple = ()
    history: list = field(default_factory=list)
    steps: list = field(default_factory=list)


def bicgstab_loop(op, b, x, r, cfg, shadow=None, C=None, xi=None, divergence_factor=None, t0=None, inspect=None):
    """BiCGStab iterations, optionally on the projected operator ``(I - CC^T) A``.

    With ``C`` given, every product is orthogonalized against ``C`` and the
    matching solution corrections are accumulated in ``xi`` (updated in
    place) instead of being applied.
    """
    t0 = time.perf_counter() if t0 is None else t0
    thresh = threshold(cfg, np.linalg.norm(b))
    st = _BiCGState(x, r)
    r0norm = np.linalg.norm(r)
    st.history.append(HistoryEntry(op.n, r0norm, time.perf_counter() - t0))
    r_sh = make_shadow(cfg, r) if shadow is None else np.asarray(shadow, dtype=np.float64)
    sh_norm = np.linalg.norm(r_sh)
    rnorm = r0norm
    p = v = None
    rho_old = alpha = omega = 0.0
    i = 0
    limit = None if divergence_factor is None else divergence_factor * r0norm

    def diverged(nrm):
        return limit is not None and nrm > limit

    if rnorm <= thresh:
        st.status = CONVERGED
        return st
    while op.n < cfg.max_itn:
        rho = r_sh @ r
        if abs(rho) <= BREAKDOWN_TOL * sh_norm * rnorm:
            st.status, st.flags = BREAKDOWN, ("rho",)
            return st
        if i == 0:
            p = r.copy()
        else:
            beta = (rho / rho_old) * (alpha / omega)
            p = r + beta * (p - omega * v)
        v = op(p)
        st.iterations += 1
        st.steps.append(1)
        if C is not None:
            eta1 = C.T @ v
            v -= C @ eta1
        den = r_sh @ v
        if abs(den) <= BREAKDOWN_TOL * sh_norm * np.linalg.norm(v):
            st.status, st.flags = BREAKDOWN, ("alpha",)
            return st
        alpha = rho / den
        s = r - alpha * v
        snorm = np.linalg.norm(s)
        if snorm <= thresh:
            x += alpha * p
            st.r = r = s
            if C is not None:
                xi += alpha * eta1
            st.history.append(HistoryEntry(op.n, snorm, time.perf_counter() - t0))
            st.status = CONVERGED
            if inspect is not None:
                inspect(i, r)
            return st
        if diverged(snorm):
            st.status, st.flags = BREAKDOWN, ("diverged",)
            st.history.append(HistoryEntry(op.n, snorm, time.perf_counter() - t0))
            return st
        t = op(s)
        st.steps[-1] = 2
        if C is not None:
            eta2 = C.T @ t
            t -= C @ eta2
        tt = t @ t
        if tt == 0.0:
            st.status, st.flags = BREAKDOWN, ("omega",)
            return st
        omega = (t @ s) / tt
        if C is not None:
            xi += alpha * eta1 + omega * eta2
        x += alpha * p + omega * s
        st.r = r = s - omega * t
        rnorm = np.linalg.norm(r)
        rho_old = rho
        i += 1
        st.history.append(HistoryEntry(op.n, rnorm, time.perf_counter() - t0))
        if inspect is not None:
            inspect(i, r)
        if rnorm <= thresh:
            st.status = CONVERGED
            return st
        if diverged(rnorm):
            st.status, st.flags = BREAKDOWN, ("diverged",)
            return st
        if omega == 0.0:
            st.status, st.flags = BREAKDOWN, ("omega",)
            return st
    return st


def bicgstab(A_op, b, x0=None, cfg: SolverConfig = SolverConfig(), shadow=None, divergence_factor=None, inspect=None):
    """BiCGStab; ``A_op`` is the right-preconditioned operator ``A M^{-1}``.

    ``shadow`` overrides ``cfg.shadow_choice`` with an explicit vector.
    ``divergence_factor`` aborts with status breakdown once a residual exceeds
    that multiple of the initial residual norm.
    """
    t0 = time.perf_counter()
    b, x0 = _check_rhs(b, x0)
    op = _Counted(as_operator(A_op))
    x, r = _initial(op, b, x0)
    init_mv = op.n
    st = bicgstab_loop(op, b, x, r, cfg, shadow=shadow, divergence_factor=divergence_factor, t0=t0, inspect=inspect)
    return st.x, SolveReport(
        method="bicgstab",
        status=st.status,
        matvecs=op.n,
        iterations=st.iterations,
        residual_history=st.history,
        wall_time=time.perf_counter() - t0,
        final_residual_norm=st.history[-1].norm,
        initial_residual_norm=st.history[0].norm,
        threshold=threshold(cfg, np.linalg.norm(b)),
        residual_kind="true",
        cycle_steps=tuple(st.steps),
        initial_matvecs=init_mv,
        storage=bicgstab_workspace(b.size).units,
        flags=st.flags,
    )
