"""Run solver comparisons over system sequences and write CSV reports.

Solver names may carry parameters: ``gmres(30)``, ``rgcrot(10,40)``,
``hybrid(5)``.  Without them the ``gmres.*``, ``rgcrot.*`` and ``hybrid.*``
config keys apply.  Every file is written with 17 significant digits so that
:func:`read_report` reconstructs a report exactly.
"""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from .flow import FlowParams, FractionalStepDriver
from .hybrid import (
    BicgstabSequence,
    GmresSequence,
    HybridPolicy,
    HybridSequence,
    RgcrotSequence,
    SequenceReport,
    run_sequence,
)
from .precond import PreconditionerSpec
from .problems import (
    SystemSequence,
    load_sequence,
    make_convection_diffusion,
    make_poisson,
    make_porous_mask,
    perturbed_sequence,
)
from .recycling import GcrotParams
from .solvers import HistoryEntry, SolveReport, SolverConfig
from .sparse import GridShape

__all__ = [
    "RunConfig",
    "NotFoundError",
    "parse_config",
    "load_config",
    "build_source",
    "make_solver",
    "run_comparison",
    "expected_matvecs",
    "write_report",
    "read_report",
    "write_summary",
    "plot_data_export",
    "solver_label",
]

FLOW_KINDS = ("channel", "porous_flow")
STATIC_KINDS = ("poisson", "convdiff", "porous", "file")
MODES = ("independent", "shared_rhs")


class NotFoundError(KeyError):
    pass


@dataclass
class RunConfig:
    problem: dict = field(default_factory=lambda: {"kind": "convdiff"})
    solvers: tuple = ("gmres", "bicgstab", "rgcrot", "hybrid")
    solver: SolverConfig = SolverConfig()
    gmres_m: int = 30
    gcrot: GcrotParams = GcrotParams(10, 40)
    hybrid: HybridPolicy = HybridPolicy()
    precond: PreconditionerSpec = PreconditionerSpec()
    out_dir: Path | None = None
    seed: int = 0
    mode: str = "independent"

    def __post_init__(self):
        if not self.solvers:
            raise ValueError("at least one solver is required")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        kind = self.problem.get("kind")
        if kind not in FLOW_KINDS + STATIC_KINDS:
            raise ValueError(f"unknown problem kind {kind!r}")
        for name in self.solvers:
            _parse_solver(name)


def _value(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", ""):
        return None
    for conv in (int, float):
        try:
            return conv(t)
        except ValueError:
            pass
    return t


def parse_config(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = _value(v)
    return out


def _pick(d: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in d.items() if k.startswith(prefix)}


def config_from_dict(d: dict, **overrides) -> RunConfig:
    d = {**d, **{k: v for k, v in overrides.items() if v is not None}}
    problem = _pick(d, "problem.")
    problem.setdefault("kind", "convdiff")
    kind = problem["kind"]
    s = _pick(d, "solver.")
    if "tol" not in s:
        # channel flow: absolute 1e-6; porous flow: relative 1e-10
        s["tol"], s["tol_mode"] = {"channel": (1e-6, "absolute"), "porous_flow": (1e-10, "relative")}.get(
            kind, (1e-8, "relative"))
    solver = SolverConfig(
        tol=float(s["tol"]),
        tol_mode=s.get("tol_mode") or "relative",
        max_itn=int(s.get("max_itn", 5000)),
        m=int(d.get("gmres.m", 30)),
        shadow_choice=s.get("shadow_choice", "initial_residual"),
        seed=int(d.get("seed", 0)),
    )
    g = _pick(d, "rgcrot.")
    gcrot = GcrotParams(
        m=int(g.get("m", 10)),
        k_max=int(g.get("k", 40)),
        trunc_keep=g.get("trunc_keep"),
        select_pool=g.get("select_pool"),
        select_count=int(g.get("select_count", 1)),
        keep_latest=int(g.get("keep_latest", 0)),
    )
    h = _pick(d, "hybrid.")
    hybrid = HybridPolicy(
        n_switch=int(h.get("n_switch", 5)),
        gcrot_params=gcrot,
        divergence_factor=float(h.get("divergence_factor", 1e4)),
        allow_switchback=bool(h.get("allow_switchback", False)),
        refresh_every_n=h.get("refresh_every_n"),
    )
    p = _pick(d, "precond.")
    precond = PreconditionerSpec(kind=p.get("kind", "jacobi"), sweeps=int(p.get("sweeps", 5)), relax=p.get("relax"))
    solvers = d.get("solvers", "gmres, bicgstab, rgcrot, hybrid")
    names = tuple(n.strip() for n in re.split(r",\s*(?![^()]*\))", str(solvers)) if n.strip())
    out = d.get("out") or d.get("output.dir")
    return RunConfig(
        problem=problem,
        solvers=names,
        solver=solver,
        gmres_m=int(d.get("gmres.m", 30)),
        gcrot=gcrot,
        hybrid=hybrid,
        precond=precond,
        out_dir=Path(out) if out else None,
        seed=int(d.get("seed", 0)),
        mode=d.get("mode", "independent"),
    )


def load_config(path, **overrides) -> RunConfig:
    return config_from_dict(parse_config(Path(path).read_text(encoding="utf-8")), **overrides)


def _shape(p: dict) -> GridShape:
    return GridShape(int(p.get("nx", 32)), int(p.get("ny", 32)), int(p.get("nz", 1)))


def _wind(p: dict):
    w = p.get("wind", "1 0.5")
    return tuple(float(t) for t in str(w).replace(",", " ").split())


def build_source(cfg: RunConfig):
    """A fresh right-hand-side source for the configured problem.

    Flow problems return a :class:`FractionalStepDriver` whose next
    right-hand side depends on the solutions sent back; the other kinds
    return a fixed :class:`SystemSequence`.
    """
    p, seed = cfg.problem, cfg.seed
    kind = p["kind"]
    if kind in FLOW_KINDS:
        params = FlowParams(
            nx=int(p.get("nx", 32)),
            ny=int(p.get("ny", 16)),
            dt=float(p.get("dt", 2e-3)),
            nu=float(p.get("nu", 1e-2)),
            forcing=float(p.get("forcing", 1.0)),
            geometry="channel" if kind == "channel" else "porous",
            porosity=float(p.get("porosity", 0.8)),
            perturbation=float(p.get("perturbation", 0.05)),
            seed=seed,
            steps=int(p.get("steps", 30)),
        )
        return FractionalStepDriver(params)
    if kind == "file":
        return load_sequence(p["path"])
    shape = _shape(p)
    if kind == "poisson":
        A = make_poisson(shape, p.get("bc", "dirichlet"))
    elif kind == "convdiff":
        A = make_convection_diffusion(shape, float(p.get("peclet", 0.1)), _wind(p))
    else:
        A = make_porous_mask(shape, float(p.get("porosity", 0.8)), seed, float(p.get("peclet", 0.0)), _wind(p))
    return perturbed_sequence(A, int(p.get("steps", 10)), seed, float(p.get("amplitude", 0.01)), float(p.get("drift", 0.01)))


_SOLVER_RE = re.compile(r"^(gmres|bicgstab|rgcrot|hybrid)(?:\(([\d,\s]*)\))?$")


def _parse_solver(name: str):
    m = _SOLVER_RE.match(name.replace(" ", ""))
    if not m:
        raise ValueError(f"unknown solver {name!r}")
    args = tuple(int(a) for a in m.group(2).split(",") if a) if m.group(2) else ()
    return m.group(1), args


def solver_label(name: str) -> str:
    """File-name-safe label: ``rgcrot(10,40)`` -> ``rgcrot_10_40``."""
    kind, args = _parse_solver(name)
    return "_".join([kind, *map(str, args)])


def make_solver(name: str, A, cfg: RunConfig):
    kind, args = _parse_solver(name)
    if kind == "gmres":
        m = args[0] if args else cfg.gmres_m
        return GmresSequence(A, cfg.solver.replace(m=m), cfg.precond)
    if kind == "bicgstab":
        return BicgstabSequence(A, cfg.solver, cfg.precond)
    gp = cfg.gcrot
    if kind == "rgcrot":
        if args:
            k = args[1] if len(args) > 1 else gp.k_max
            gp = replace(gp, m=args[0], k_max=k, trunc_keep=None, select_pool=None)
        return RgcrotSequence(A, cfg.solver, cfg.precond, gp)
    pol = replace(cfg.hybrid, n_switch=args[0]) if args else cfg.hybrid
    return HybridSequence(A, cfg.solver, cfg.precond, pol)


class _Recorder:
    """Wraps a source and keeps every right-hand side it produces."""

    def __init__(self, source):
        self.source = source
        self.rhs = []

    def stream(self):
        gen = self.source.stream()
        try:
            b = next(gen)
            while True:
                self.rhs.append(b.copy())
                b = gen.send((yield b))
        except StopIteration:
            return


def run_comparison(cfg: RunConfig) -> dict[str, SequenceReport]:
    """Run every configured solver; write CSV files when ``out_dir`` is set.

    ``independent``: each solver advances its own copy of the problem.
    ``shared_rhs``: the first solver drives the problem and the others
    re-solve the right-hand sides it produced.
    """
    results = {}
    if cfg.mode == "independent":
        for name in cfg.solvers:
            src = build_source(cfg)
            results[name] = run_sequence(src, make_solver(name, src.A, cfg), name)
    else:
        master, *rest = cfg.solvers
        src = _Recorder(build_source(cfg))
        A = src.source.A
        results[master] = run_sequence(src, make_solver(master, A, cfg), master)
        shared = SystemSequence(A, src.rhs, meta={"generator": "shared_rhs", "master": master})
        for name in rest:
            results[name] = run_sequence(shared, make_solver(name, A, cfg), name)
    if cfg.out_dir is not None:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, rep in results.items():
            write_report(rep, out, solver_label(name))
            plot_data_export(rep, out, solver_label(name))
        write_summary(results, out / "summary.csv")
    return results


def expected_matvecs(rep: SolveReport) -> int:
    """Matvec count implied by the per-solver accounting rules.

    GMRES-type cycles cost their Arnoldi steps plus one true-residual
    product; BiCGStab iterations cost one or two products.  Initial
    residuals, recycle-space refreshes and final residual checks are added.
    """
    per_cycle = 1 if rep.method in ("gmres", "rgcrot") else 0
    return (
        rep.initial_matvecs
        + sum(rep.cycle_steps)
        + per_cycle * len(rep.cycle_steps)
        + rep.setup_matvecs
        + rep.final_check_matvecs
    )


def _f(v) -> str:
    return "" if v is None else repr(float(v))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


SYSTEM_FIELDS = (
    "system_index", "tag", "method", "status", "matvecs", "iterations", "cycle_steps", "initial_matvecs",
    "setup_matvecs", "final_check_matvecs", "final_residual_norm", "initial_residual_norm",
    "updated_residual_norm", "threshold", "residual_kind", "flags", "wall_time_s", "storage", "rhs_norm",
    "space_digest",
)


def write_report(seq: SequenceReport, out_dir, label: str) -> None:
    """``history_``, ``estimates_``, ``systems_`` and ``events_`` files for one solver."""
    out = Path(out_dir)
    hist, est, systems = [], [], []
    for t, rep in enumerate(seq.reports):
        hist += [(t, h.matvecs, _f(h.norm), _f(h.seconds)) for h in rep.residual_history]
        est += [(t, h.matvecs, _f(h.norm), _f(h.seconds)) for h in rep.estimates]
        systems.append((
            t, seq.tags[t], rep.method, rep.status, rep.matvecs, rep.iterations,
            " ".join(map(str, rep.cycle_steps)), rep.initial_matvecs, rep.setup_matvecs, rep.final_check_matvecs,
            _f(rep.final_residual_norm), _f(rep.initial_residual_norm), _f(rep.updated_residual_norm),
            _f(rep.threshold), rep.residual_kind, " ".join(rep.flags), _f(rep.wall_time), rep.storage,
            _f(seq.rhs_norms[t]), seq.space_digests[t] or "",
        ))
    _write_csv(out / f"history_{label}.csv", ("system_index", "matvec_count", "residual_norm", "wall_time_s"), hist)
    _write_csv(out / f"estimates_{label}.csv", ("system_index", "matvec_count", "estimate", "wall_time_s"), est)
    _write_csv(out / f"systems_{label}.csv", SYSTEM_FIELDS, systems)
    _write_csv(out / f"events_{label}.csv", ("system_index", "flags", "growth"),
               [(e["system"], " ".join(e["flags"]), _f(e["growth"])) for e in seq.events])
    meta = f"solver = {seq.solver}\nstorage = {seq.storage}\n"
    if seq.aborted:
        meta += f"aborted = {seq.aborted}\n"
    (out / f"meta_{label}.txt").write_text(meta, encoding="utf-8")


def read_report(out_dir, label: str) -> SequenceReport:
    """Inverse of :func:`write_report`."""
    out = Path(out_dir)
    meta = dict(ln.split(" = ", 1) for ln in (out / f"meta_{label}.txt").read_text(encoding="utf-8").splitlines())
    seq = SequenceReport(meta["solver"], storage=int(meta["storage"]), aborted=meta.get("aborted"))
    hist: dict[int, list] = {}
    est: dict[int, list] = {}
    for store, name in ((hist, "history"), (est, "estimates")):
        for row in _read_csv(out / f"{name}_{label}.csv"):
            key = "residual_norm" if name == "history" else "estimate"
            store.setdefault(int(row["system_index"]), []).append(
                HistoryEntry(int(row["matvec_count"]), float(row[key]), float(row["wall_time_s"])))
    opt = lambda s: float(s) if s else None  # noqa: E731
    for row in _read_csv(out / f"systems_{label}.csv"):
        t = int(row["system_index"])
        seq.reports.append(SolveReport(
            method=row["method"],
            status=row["status"],
            matvecs=int(row["matvecs"]),
            iterations=int(row["iterations"]),
            residual_history=hist.get(t, []),
            wall_time=float(row["wall_time_s"]),
            final_residual_norm=float(row["final_residual_norm"]),
            initial_residual_norm=float(row["initial_residual_norm"]),
            threshold=float(row["threshold"]),
            residual_kind=row["residual_kind"],
            cycle_steps=tuple(int(c) for c in row["cycle_steps"].split()),
            setup_matvecs=int(row["setup_matvecs"]),
            initial_matvecs=int(row["initial_matvecs"]),
            storage=int(row["storage"]),
            flags=tuple(row["flags"].split()),
            estimates=est.get(t, []),
            updated_residual_norm=opt(row["updated_residual_norm"]),
            final_check_matvecs=int(row["final_check_matvecs"]),
        ))
        seq.tags.append(row["tag"])
        seq.rhs_norms.append(float(row["rhs_norm"]))
        seq.space_digests.append(row["space_digest"] or None)
    for row in _read_csv(out / f"events_{label}.csv"):
        seq.events.append({"system": int(row["system_index"]), "flags": tuple(row["flags"].split()),
                           "growth": float(row["growth"])})
    return seq


SUMMARY_FIELDS = (
    "solver", "systems", "converged", "statuses", "total_matvecs", "total_time_s", "avg_matvecs",
    "avg_matvecs_rbicgstab", "avg_iterations", "time_per_iteration_s", "storage_n_vectors", "instability_events",
)


def summary_row(name: str, seq: SequenceReport) -> dict:
    n = len(seq)
    its = sum(r.iterations for r in seq.reports)
    total_t = seq.total_time
    bicg = [r.matvecs for r, tag in zip(seq.reports, seq.tags) if tag == "rbicgstab"]
    counts: dict[str, int] = {}
    for r in seq.reports:
        counts[r.status] = counts.get(r.status, 0) + 1
    if seq.aborted:
        counts["aborted"] = 1
    return {
        "solver": name,
        "systems": n,
        "converged": int(seq.all_converged),
        "statuses": " ".join(f"{k}:{v}" for k, v in sorted(counts.items())),
        "total_matvecs": seq.total_matvecs,
        "total_time_s": total_t,
        "avg_matvecs": seq.total_matvecs / n if n else 0.0,
        "avg_matvecs_rbicgstab": sum(bicg) / len(bicg) if bicg else None,
        "avg_iterations": its / n if n else 0.0,
        "time_per_iteration_s": total_t / its if its else None,
        "storage_n_vectors": seq.storage,
        "instability_events": len(seq.events),
    }


def write_summary(results: dict, path) -> None:
    rows = []
    for name, seq in results.items():
        r = summary_row(name, seq)
        rows.append([_f(v) if isinstance(v, float) or (v is None) else v for v in (r[k] for k in SUMMARY_FIELDS)])
    _write_csv(Path(path), SUMMARY_FIELDS, rows)


def plot_data_export(seq: SequenceReport, out_dir, label: str, curve_systems=()) -> list[Path]:
    """Data behind the convergence figures (no rendering).

    Writes ``trace_<label>.csv`` (matvecs and initial residual per system) and,
    for every index in ``curve_systems``, ``curve_<label>_<t>.csv`` holding the
    residual-versus-matvec curve of that system (checked residuals and, for
    GMRES-type methods, the per-step estimates).
    """
    if len(seq) == 0:
        raise ValueError("empty report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / f"trace_{label}.csv"]
    _write_csv(written[0], ("system_index", "tag", "matvecs", "r0_norm", "initial_residual_norm"),
               [(t, seq.tags[t], r.matvecs, _f(seq.rhs_norms[t]), _f(r.initial_residual_norm))
                for t, r in enumerate(seq.reports)])
    for t in curve_systems:
        if not 0 <= t < len(seq):
            raise NotFoundError(f"no system with index {t} (report has {len(seq)} systems)")
        rep = seq.reports[t]
        rows = [(h.matvecs, _f(h.norm), "checked") for h in rep.residual_history]
        rows += [(h.matvecs, _f(h.norm), "estimate") for h in rep.estimates]
        rows.sort(key=lambda r: (r[0], r[2]))
        path = out / f"curve_{label}_{t}.csv"
        _write_csv(path, ("matvec_count", "residual_norm", "kind"), rows)
        written.append(path)
    return written


def format_summary(results: dict) -> str:
    lines = [f"{'solver':<16}{'systems':>8}{'matvecs':>10}{'avg':>10}{'avg rBiCG':>11}{'storage':>9}  status"]
    for name, seq in results.items():
        r = summary_row(name, seq)
        rb = "-" if r["avg_matvecs_rbicgstab"] is None else f"{r['avg_matvecs_rbicgstab']:.1f}"
        lines.append(f"{name:<16}{r['systems']:>8}{r['total_matvecs']:>10}{r['avg_matvecs']:>10.1f}{rb:>11}"
                     f"{r['storage_n_vectors']:>8}N  {r['statuses']}")
    return "\n".join(lines)
