"""Krylov subspace recycling: the (U, C, R) space, rGCROT(m, k) and rBiCGStab.

A recycle space stores a basis ``U`` of the recycled subspace together with
the thin QR factorization ``A U = C R`` for the operator being iterated.
Solvers iterate orthogonally to ``range(C)`` and fold the ``U`` components
into the solution.
"""
from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import qr, solve_triangular

from .solvers import (
    BREAKDOWN,
    CONVERGED,
    MAX_ITERATIONS,
    STAGNATION,
    HistoryEntry,
    SolveReport,
    SolverConfig,
    Workspace,
    _Counted,
    _check_rhs,
    _initial,
    _stagnated,
    arnoldi_cycle,
    as_operator,
    bicgstab_loop,
    bicgstab_workspace,
    threshold,
)

__all__ = [
    "RecycleSpace",
    "GcrotParams",
    "refresh_qr",
    "project_initial",
    "update_recycle",
    "rgcrot",
    "rbicgstab",
    "gcrot_storage",
    "save_space",
    "load_space",
]

RANK_TOL = 1e-10
DIAG_TOL = 1e-12
DEGENERATE = 1e-12


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RecycleSpace:
    """Recycled subspace ``range(U)`` with ``A U = C R``, ``C`` orthonormal.

    Instances are immutable; every update returns a new space.  ``dropped``
    records how many columns the most recent factorization discarded as
    numerically dependent.
    """

    U: np.ndarray
    C: np.ndarray
    R: np.ndarray
    dropped: int = 0

    def __post_init__(self):
        U, C, R = _frozen(self.U), _frozen(self.C), _frozen(self.R)
        if U.ndim != 2 or C.shape != U.shape or R.shape != (U.shape[1], U.shape[1]):
            raise ValueError(f"inconsistent shapes U{U.shape} C{C.shape} R{R.shape}")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "R", R)

    @classmethod
    def empty(cls, N: int) -> "RecycleSpace":
        return cls(np.zeros((N, 0)), np.zeros((N, 0)), np.zeros((0, 0)))

    @classmethod
    def from_basis(cls, U, A_op) -> "RecycleSpace":
        """Build a space from an arbitrary basis (costs ``k`` matvecs)."""
        U = np.asarray(U, dtype=np.float64)
        return refresh_qr(cls(U, np.zeros_like(U), np.eye(U.shape[1])), A_op)

    @property
    def N(self) -> int:
        return self.U.shape[0]

    @property
    def k(self) -> int:
        return self.U.shape[1]

    def solve_R(self, z: np.ndarray) -> np.ndarray:
        """``U R^{-1} z`` by back substitution."""
        if self.k == 0:
            return np.zeros(self.N)
        return self.U @ solve_triangular(self.R, z)

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.U, self.C, self.R):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class GcrotParams:
    """Parameters of rGCROT(m, k).

    ``k_max = 0`` disables recycling entirely (the method is then GMRES(m)).
    ``trunc_keep`` defaults to ``k_max - 10`` (or ``k_max // 2`` for small
    spaces) and ``select_pool`` to ``m // 2``.
    """

    m: int = 10
    k_max: int = 20
    trunc_keep: int | None = None
    select_pool: int | None = None
    select_count: int = 1
    keep_latest: int = 0

    def __post_init__(self):
        if self.m < 1 or self.k_max < 0:
            raise ValueError("need m >= 1 and k_max >= 0")
        if self.trunc_keep is None:
            tk = self.k_max - 10 if self.k_max > 10 else self.k_max // 2
            object.__setattr__(self, "trunc_keep", tk)
        if self.select_pool is None:
            object.__setattr__(self, "select_pool", max(1, self.m // 2))
        if self.select_count < 0 or self.select_pool > self.m:
            raise ValueError("need 0 <= select_count and select_pool <= m")
        if self.select_count > self.select_pool:
            raise ValueError("select_count may not exceed select_pool")
        if self.k_max > 0 and not 0 <= self.trunc_keep < self.k_max:
            raise ValueError("trunc_keep must satisfy 0 <= trunc_keep < k_max")
        if not 0 <= self.keep_latest <= self.trunc_keep:
            raise ValueError("keep_latest must lie in [0, trunc_keep]")


def gcrot_storage(m: int, k_max: int) -> int:
    return (m + 1) + 4 + 2 * k_max


def _qr_dropping(U: np.ndarray, AU: np.ndarray):
    """Thin QR of ``AU``, discarding columns that make ``R`` numerically singular."""
    k = U.shape[1]
    if k == 0:
        return U, np.zeros_like(U), np.zeros((0, 0)), 0
    # rank decision from a pivoted QR; the diagonal of an unpivoted R can
    # look healthy while R itself is nearly singular
    _, Rp, piv = qr(AU, mode="economic", pivoting=True)
    d = np.abs(np.diag(Rp))
    rank = int(np.sum(d > RANK_TOL * d[0])) if d[0] > 0 else 0
    keep = np.sort(piv[:rank])
    U, AU = U[:, keep], AU[:, keep]
    if rank == 0:
        return U, np.zeros_like(U), np.zeros((0, 0)), k
    while True:
        C, R = np.linalg.qr(AU)
        d = np.abs(np.diag(R))
        if d.min() > DIAG_TOL * d.max():
            return U, C, R, k - U.shape[1]
        worst = int(np.argmin(d))
        U, AU = np.delete(U, worst, axis=1), np.delete(AU, worst, axis=1)


def _factor(U, AU) -> RecycleSpace:
    U, C, R, dropped = _qr_dropping(np.asarray(U, dtype=np.float64), np.asarray(AU, dtype=np.float64))
    return RecycleSpace(U, C, R, dropped)


def refresh_qr(space: RecycleSpace, A_op) -> RecycleSpace:
    """Recompute ``A U = C R`` for the operator ``A_op`` (``k`` matvecs)."""
    op = as_operator(A_op)
    if space.k == 0:
        return RecycleSpace.empty(space.N)
    AU = np.column_stack([op(space.U[:, j]) for j in range(space.k)])
    return _factor(space.U, AU)


def project_initial(space: RecycleSpace, x_hat, r_hat, deferred: bool = False):
    """Remove the ``range(C)`` component of the initial residual.

    Returns ``(x0, r0, xi0)`` with ``C^T r0 = 0``.  The matching solution
    update ``U R^{-1} C^T r_hat`` is applied to ``x0`` immediately, or, with
    ``deferred=True``, left to the caller through ``xi0 = -C^T r_hat``
    (subtract ``U R^{-1} xi`` at the end).
    """
    x_hat = np.asarray(x_hat, dtype=np.float64)
    r_hat = np.asarray(r_hat, dtype=np.float64)
    if space.k == 0:
        return x_hat.copy(), r_hat.copy(), np.zeros(0)
    xi = space.C.T @ r_hat
    r0 = r_hat - space.C @ xi
    if deferred:
        return x_hat.copy(), r0, -xi
    return x_hat + space.solve_R(xi), r0, xi


def _candidates(cyc, C, params: GcrotParams):
    """Directions proposed for promotion, with their operator images.

    The first candidate is the full inner update ``V_m y``; the rest are the
    pool vectors ``v_j y_j`` ranked by ``|y_j|``.  Images come from
    ``A V_m = C B + V_{m+1} H`` without any matvec.
    """
    s = cyc.steps
    Vm, H, B, y = cyc.Vm, cyc.H, cyc.B, cyc.y

    def image(coef):
        out = cyc.V @ (H @ coef)
        if C is not None and C.shape[1]:
            out += C @ (B @ coef)
        return out

    yield Vm @ y, image(y)
    pool = min(params.select_pool, s)
    for j in sorted(range(pool), key=lambda j: -abs(y[j])):
        e = np.zeros(s)
        e[j] = y[j]
        yield Vm @ e, image(e)


def update_recycle(space: RecycleSpace, cyc, params: GcrotParams) -> RecycleSpace:
    """Extend the recycle space with directions from the last cycle.

    Promotes ``select_count`` candidate directions, drops dependent ones,
    and truncates to the ``trunc_keep`` newest columns (keeping the
    ``keep_latest`` most recent regardless) once ``k_max`` is exceeded.
    No matvecs are spent.
    """
    if params.select_count == 0 or params.k_max == 0 or cyc.steps == 0:
        return space
    new_u, new_au = [], []
    for w, aw in _candidates(cyc, space.C, params):
        if len(new_u) == params.select_count:
            break
        na = np.linalg.norm(aw)
        if np.linalg.norm(w) < DEGENERATE or na < DEGENERATE:
            continue
        new_u.append(w / na)
        new_au.append(aw / na)
    if not new_u:
        return space
    U = np.column_stack([space.U] + new_u)
    AU = np.column_stack([space.C @ space.R] + new_au)
    U, C, R, dropped = _qr_dropping(U, AU)
    if U.shape[1] > params.k_max:
        AU = C @ R
        keep = params.trunc_keep
        idx = list(range(U.shape[1] - keep, U.shape[1]))
        U, AU = U[:, idx], AU[:, idx]
        U, C, R, d2 = _qr_dropping(U, AU)
        dropped += d2
    return RecycleSpace(U, C, R, dropped)


def rgcrot(A_op, b, x_hat=None, space: RecycleSpace | None = None, params: GcrotParams = GcrotParams(),
           cfg: SolverConfig = SolverConfig(), inspect=None, residual_kind="true"):
    """rGCROT(m, k): restarted GMRES iterating orthogonally to a recycle space.

    ``space`` must satisfy ``A U = C R`` for ``A_op`` (call
    :func:`refresh_qr` after the operator changes).  ``params.m`` is the
    cycle length; ``cfg.m`` is ignored.  ``inspect(cycle, space, r_old)`` is
    called after each cycle, before the space is updated.

    Returns
    -------
    x, RecycleSpace, SolveReport
        The returned space is the evolved space, to be handed to the next
        system of a sequence.
    """
    t0 = time.perf_counter()
    b, x_hat = _check_rhs(b, x_hat)
    op = _Counted(as_operator(A_op))
    space = RecycleSpace.empty(b.size) if space is None else space
    if space.N != b.size:
        raise ValueError("recycle space dimension does not match the system")
    m = params.m
    ws = Workspace(b.size)
    V = ws.block("V", m + 1)
    for name in ("r", "w", "op_work", "Vy"):
        ws.reserve(name, 1)
    ws.reserve("U", params.k_max)
    ws.reserve("C", params.k_max)

    x, r_hat = _initial(op, b, x_hat)
    init_mv = op.n
    x, r, _ = project_initial(space, x, r_hat)
    bnorm = np.linalg.norm(b)
    thresh = threshold(cfg, bnorm)
    rho = np.linalg.norm(r)
    history = [HistoryEntry(op.n, rho, 0.0)]
    estimates, steps_log = [], []
    while rho > thresh and op.n < cfg.max_itn:
        base = op.n
        C = space.C if space.k else None
        cyc = arnoldi_cycle(
            op, r, rho, m, C=C, V=V,
            on_step=lambda j, e: estimates.append(HistoryEntry(base + j + 1, e, time.perf_counter() - t0)),
        )
        x += cyc.Vm @ cyc.y
        if space.k:
            z = -(cyc.B @ cyc.y)
            x += space.solve_R(z)
        r_old = r
        r = b - op(x)
        if inspect is not None:
            inspect(cyc, space, r_old)
        new_space = update_recycle(space, cyc, params)
        if new_space is not space:
            space = new_space
            x, r, _ = project_initial(space, x, r)
        rho = np.linalg.norm(r)
        steps_log.append(cyc.steps)
        history.append(HistoryEntry(op.n, rho, time.perf_counter() - t0))
    flags = ()
    if rho <= thresh:
        status = CONVERGED
    elif _stagnated(history):
        status, flags = STAGNATION, ("stagnation",)
    else:
        status = MAX_ITERATIONS
    report = SolveReport(
        method="rgcrot",
        status=status,
        matvecs=op.n,
        iterations=len(steps_log),
        residual_history=history,
        wall_time=time.perf_counter() - t0,
        final_residual_norm=rho,
        initial_residual_norm=float(np.linalg.norm(r_hat)),
        threshold=thresh,
        residual_kind=residual_kind,
        cycle_steps=tuple(steps_log),
        initial_matvecs=init_mv,
        storage=ws.units,
        flags=flags,
        estimates=estimates,
    )
    return x, space, report


def rbicgstab(A_op, b, x_hat=None, space: RecycleSpace | None = None, cfg: SolverConfig = SolverConfig(),
              shadow=None, divergence_factor=None, inspect=None, precond=None):
    """BiCGStab on ``(I - C C^T) A`` with one fixed recycle space.

    ``space`` must satisfy ``A_op U = C R``.  The ``U`` corrections are
    accumulated in a length-k vector and applied once after the loop, after
    which the true residual is recomputed (one extra matvec, skipped when
    ``x`` is zero) and used as the final residual.

    ``precond`` (the map ``y -> M^{-1} y``) switches on right
    preconditioning: the iteration runs on ``A M^{-1}``, the recycle space
    stays in the space of ``x`` and the returned vector is
    ``x = M^{-1} y - U R^{-1} xi``.  ``x_hat`` is then an initial ``y``.
    """
    t0 = time.perf_counter()
    b, x_hat = _check_rhs(b, x_hat)
    A = as_operator(A_op)
    op = _Counted(A if precond is None else (lambda v: A(precond(v))))
    space = RecycleSpace.empty(b.size) if space is None else space
    x, r_hat = _initial(op, b, x_hat)
    init_mv = op.n
    x, r, xi = project_initial(space, x, r_hat, deferred=True)
    C = space.C if space.k else None
    st = bicgstab_loop(op, b, x, r, cfg, shadow=shadow, C=C, xi=xi,
                       divergence_factor=divergence_factor, t0=t0, inspect=inspect)
    x = st.x if precond is None else precond(st.x)
    if space.k:
        x -= space.solve_R(xi)
    updated_norm = st.history[-1].norm
    check = op if precond is None else _Counted(A)
    before = check.n
    true_norm = float(np.linalg.norm(b - check(x))) if np.any(x) else float(np.linalg.norm(b))
    check_mv = check.n - before
    matvecs = op.n if check is op else op.n + check_mv
    thresh = threshold(cfg, np.linalg.norm(b))
    status, flags = st.status, st.flags
    if status == CONVERGED and true_norm > thresh:
        status, flags = MAX_ITERATIONS, flags + ("drift",)
    ws = bicgstab_workspace(b.size)
    ws.reserve("U", space.k)
    ws.reserve("C", space.k)
    report = SolveReport(
        method="rbicgstab",
        status=status,
        matvecs=matvecs,
        iterations=st.iterations,
        residual_history=st.history,
        wall_time=time.perf_counter() - t0,
        final_residual_norm=true_norm,
        initial_residual_norm=float(np.linalg.norm(r_hat)),
        threshold=thresh,
        residual_kind="updated",
        cycle_steps=tuple(st.steps),
        initial_matvecs=init_mv,
        storage=ws.units,
        flags=flags,
        updated_residual_norm=updated_norm,
        final_check_matvecs=check_mv,
    )
    return x, report


def save_space(space: RecycleSpace, path) -> None:
    """Write ``U``, ``C`` and ``R`` as plain text (17 significant digits)."""
    lines = [f"recycle {space.N} {space.k}"]
    for M in (space.U, space.C, space.R):
        lines += [" ".join(repr(float(v)) for v in row) for row in M]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_space(path) -> RecycleSpace:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    head = lines[0].split()
    if head[0] != "recycle":
        raise ValueError(f"{path}: bad header {lines[0]!r}")
    N, k = int(head[1]), int(head[2])

    def block(start, rows):
        if k == 0:
            return np.zeros((rows, 0))
        return np.array([[float(t) for t in ln.split()] for ln in lines[start:start + rows]])

    U = block(1, N)
    C = block(1 + (N if k else 0), N)
    R = block(1 + (2 * N if k else 0), k) if k else np.zeros((0, 0))
    return RecycleSpace(U, C, R)
