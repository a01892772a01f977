"""Sequence-level solvers: plain, recycling and the rGCROT -> rBiCGStab hybrid.

A sequence solver exposes ``solve(b) -> (x, SolveReport, tag)`` and keeps
whatever state it carries from one system to the next.  :func:`run_sequence`
drives one over a right-hand-side stream, sending each solution back so that
flow drivers can compute the next right-hand side from it.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from .precond import LEFT, RIGHT, PreconditionerSpec, SystemOperator
from .recycling import GcrotParams, RecycleSpace, rbicgstab, refresh_qr, rgcrot
from .sparse import matvec_count
from .solvers import BREAKDOWN, SolveReport, SolverConfig, bicgstab, gmres_m

__all__ = [
    "HybridPolicy",
    "SequenceReport",
    "GmresSequence",
    "BicgstabSequence",
    "RgcrotSequence",
    "HybridSequence",
    "run_sequence",
    "run_hybrid",
]


@dataclass(frozen=True)
class HybridPolicy:
    """Switching policy: ``n_switch`` rGCROT systems, then frozen-space rBiCGStab.

    ``refresh_every_n`` re-solves every n-th system of the rBiCGStab phase with
    rGCROT to refresh the space (off by default).
    """

    n_switch: int = 5
    gcrot_params: GcrotParams = GcrotParams(m=10, k_max=40)
    divergence_factor: float = 1e4
    allow_switchback: bool = False
    refresh_every_n: int | None = None

    def __post_init__(self):
        if self.n_switch < 1:
            raise ValueError("n_switch must be >= 1")
        if not self.divergence_factor > 1:
            raise ValueError("divergence_factor must exceed 1")
        if self.refresh_every_n is not None and self.refresh_every_n < 1:
            raise ValueError("refresh_every_n must be >= 1")


@dataclass
class SequenceReport:
    """Per-system reports of one solver over one sequence."""

    solver: str
    reports: list = field(default_factory=list)
    tags: list = field(default_factory=list)
    events: list = field(default_factory=list)
    space_digests: list = field(default_factory=list)
    rhs_norms: list = field(default_factory=list)
    storage: int = 0
    aborted: str | None = None

    @property
    def total_matvecs(self) -> int:
        return sum(r.matvecs for r in self.reports)

    @property
    def total_time(self) -> float:
        return sum(r.wall_time for r in self.reports)

    @property
    def all_converged(self) -> bool:
        return self.aborted is None and all(r.converged for r in self.reports)

    def __len__(self):
        return len(self.reports)


def _with_extra(rep: SolveReport, matvecs: int, seconds: float = 0.0, flag: str | None = None) -> SolveReport:
    """Charge setup work (space refresh, failed attempts) to a report."""
    flags = rep.flags + ((flag,) if flag else ())
    return dataclasses.replace(
        rep,
        matvecs=rep.matvecs + matvecs,
        setup_matvecs=rep.setup_matvecs + matvecs,
        wall_time=rep.wall_time + seconds,
        flags=flags,
    )


class GmresSequence:
    name = "gmres"

    def __init__(self, A, cfg: SolverConfig, P: PreconditionerSpec | None = None):
        self.op = SystemOperator(A, P, LEFT)
        self.cfg = cfg
        self.storage = cfg.m + 1 + 4

    def solve(self, b):
        x, rep = gmres_m(self.op, self.op.rhs(b), None, self.cfg, residual_kind=self.op.residual_kind)
        return x, rep, "gmres"


class BicgstabSequence:
    name = "bicgstab"
    storage = 8

    def __init__(self, A, cfg: SolverConfig, P: PreconditionerSpec | None = None):
        self.op = SystemOperator(A, P, RIGHT)
        self.cfg = cfg

    def solve(self, b):
        y, rep = bicgstab(self.op, b, None, self.cfg)
        return self.op.solution(y), rep, "bicgstab"


class RgcrotSequence:
    """rGCROT whose recycle space evolves across the whole sequence."""

    name = "rgcrot"

    def __init__(self, A, cfg: SolverConfig, P: PreconditionerSpec | None = None, params: GcrotParams = GcrotParams()):
        self.op = SystemOperator(A, P, LEFT)
        self.P = P
        self.cfg = cfg
        self.params = params
        self.space = RecycleSpace.empty(A.N)
        self.storage = params.m + 1 + 4 + 2 * params.k_max
        self.refresh_matvecs = 0

    def set_matrix(self, A):
        """Switch to a new matrix; the space is re-factored for it (``k`` matvecs)."""
        self.op = SystemOperator(A, self.P, LEFT)
        before = matvec_count()
        self.space = refresh_qr(self.space, self.op)
        self.refresh_matvecs += matvec_count() - before

    def solve(self, b):
        x, self.space, rep = rgcrot(self.op, self.op.rhs(b), None, self.space, self.params, self.cfg,
                                    residual_kind=self.op.residual_kind)
        return x, rep, "rgcrot"


class HybridSequence:
    """rGCROT for the first ``n_switch`` systems, then rBiCGStab on a frozen space."""

    name = "hybrid"

    def __init__(self, A, cfg: SolverConfig, P: PreconditionerSpec | None = None, policy: HybridPolicy = HybridPolicy()):
        self.policy = policy
        self.cfg = cfg
        self.gcrot = RgcrotSequence(A, cfg, P, policy.gcrot_params)
        self.right = SystemOperator(A, P, RIGHT)
        self.frozen: RecycleSpace | None = None
        self.t = 0
        self.events: list[dict] = []
        self.digest: str | None = None
        self.storage = self.gcrot.storage

    def set_matrix(self, A):
        self.gcrot.set_matrix(A)
        self.right = SystemOperator(A, self.gcrot.P, RIGHT)
        self.frozen = None

    def _gcrot(self, b):
        self.frozen = None
        return self.gcrot.solve(b)

    def _freeze(self):
        t0 = time.perf_counter()
        before = matvec_count()
        # the space lives in x; factor it against A itself
        self.frozen = refresh_qr(self.gcrot.space, self.right.A)
        return matvec_count() - before, time.perf_counter() - t0

    def solve(self, b):
        pol = self.policy
        t = self.t
        self.t += 1
        self.digest = None
        if t < pol.n_switch:
            return self._gcrot(b)
        phase = t - pol.n_switch
        if pol.refresh_every_n and phase > 0 and phase % pol.refresh_every_n == 0:
            return self._gcrot(b)
        setup, setup_time = (0, 0.0)
        if self.frozen is None:
            setup, setup_time = self._freeze()
        x, rep = rbicgstab(self.right.A, b, None, self.frozen, self.cfg, divergence_factor=pol.divergence_factor,
                           precond=self.right.M)
        rep = _with_extra(rep, setup, setup_time) if setup else rep
        self.digest = self.frozen.digest()
        if rep.status == BREAKDOWN:
            peak = max(h.norm for h in rep.residual_history)
            self.events.append({
                "system": t,
                "flags": rep.flags,
                "growth": peak / rep.initial_residual_norm if rep.initial_residual_norm else float("inf"),
            })
            if pol.allow_switchback:
                x, rep2, tag = self._gcrot(b)
                return x, _with_extra(rep2, rep.matvecs, rep.wall_time, "switchback"), tag
        return x, rep, "rbicgstab"


def run_sequence(source, solver, name: str | None = None) -> SequenceReport:
    """Solve every system of ``source`` (anything with ``stream()``) in order.

    Solver failures are recorded and the run goes on.  If the source itself
    cannot continue (a flow driver blowing up after a poor solution), the
    run stops and the reason is kept in ``aborted``.
    """
    out = SequenceReport(name or solver.name, storage=getattr(solver, "storage", 0))
    gen = source.stream()
    try:
        b = next(gen)
        while True:
            x, rep, tag = solver.solve(b)
            out.reports.append(rep)
            out.tags.append(tag)
            out.rhs_norms.append(float(np.linalg.norm(b)))
            out.space_digests.append(getattr(solver, "digest", None))
            try:
                b = gen.send(x)
            except StopIteration:
                raise
            except Exception as exc:
                out.aborted = f"{type(exc).__name__}: {exc}"
                break
    except StopIteration:
        pass
    out.events = list(getattr(solver, "events", []))
    return out


def run_hybrid(seq, policy: HybridPolicy, cfg: SolverConfig, P: PreconditionerSpec | None = None) -> SequenceReport:
    if len(seq) == 0:
        raise ValueError("empty sequence")
    return run_sequence(seq, HybridSequence(seq.A, cfg, P, policy))
