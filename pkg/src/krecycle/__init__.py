"""Krylov subspace recycling for sequences of linear systems.

Structured-grid stencil matrices, smoothing preconditioners, GMRES(m) and
BiCGStab baselines, the recycling solvers rGCROT(m, k) and rBiCGStab, a
hybrid sequence controller, test-problem generators and a comparison
harness.
"""
from .sparse import GridShape, StencilMatrix, matvec, matvec_count, residual, to_dense, to_csr
from .precond import PreconditionerSpec, Preconditioner, SystemOperator, apply
from .solvers import SolverConfig, SolveReport, bicgstab, gmres_m
from .recycling import GcrotParams, RecycleSpace, rbicgstab, refresh_qr, rgcrot
from .hybrid import HybridPolicy, SequenceReport, run_hybrid, run_sequence
from .problems import (
    SystemSequence,
    make_convection_diffusion,
    make_poisson,
    make_porous_mask,
    perturbed_sequence,
)
from .flow import FractionalStepDriver, fractional_step_sequence

__all__ = [
    "GridShape", "StencilMatrix", "matvec", "matvec_count", "residual", "to_dense", "to_csr",
    "PreconditionerSpec", "Preconditioner", "SystemOperator", "apply",
    "SolverConfig", "SolveReport", "bicgstab", "gmres_m",
    "GcrotParams", "RecycleSpace", "rbicgstab", "refresh_qr", "rgcrot",
    "HybridPolicy", "SequenceReport", "run_hybrid", "run_sequence",
    "SystemSequence", "make_convection_diffusion", "make_poisson", "make_porous_mask", "perturbed_sequence",
    "FractionalStepDriver", "fractional_step_sequence",
]
