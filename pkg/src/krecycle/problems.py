"""Test matrices and right-hand-side sequences on structured grids.

All generators emit 5-point (2D, ``nz == 1``) or 7-point (3D) stencils.
Axes with a single cell carry no discretization, so ``GridShape(n)`` gives
the 1D three-point Laplacian stored in a 5-point stencil.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .sparse import GridShape, StencilMatrix, load_matrix, load_vector, save_matrix, save_vector

__all__ = [
    "SystemSequence",
    "GenerationError",
    "make_poisson",
    "make_convection_diffusion",
    "make_porous_mask",
    "perturbed_sequence",
    "skew_dominated_matrix",
    "save_sequence",
    "load_sequence",
    "stencil_offsets",
    "is_connected",
    "fluid_components",
]

BCS = ("dirichlet", "periodic_x", "neumann", "channel")


class GenerationError(RuntimeError):
    pass


def stencil_offsets(shape: GridShape) -> list[tuple[int, int, int]]:
    offs = [(0, 0, 0), (-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0)]
    if shape.nz > 1:
        offs += [(0, 0, -1), (0, 0, 1)]
    return offs


def _grid(shape: GridShape):
    k, j, i = np.meshgrid(np.arange(shape.nz), np.arange(shape.ny), np.arange(shape.nx), indexing="ij")
    return i.ravel(), j.ravel(), k.ravel()


def _neighbor(shape, idx, off, periodic):
    """Flat neighbor index and an in-grid mask for every cell."""
    out, ok = [], np.ones(shape.N, dtype=bool)
    for c, d, n, per in zip(idx, off, shape.dims, periodic):
        c = c + d
        if per:
            c = c % n
        else:
            ok &= (c >= 0) & (c < n)
            c = np.clip(c, 0, n - 1)
        out.append(c)
    return out[0] + shape.nx * (out[1] + shape.ny * out[2]), ok


def _assemble(shape, bc, solid=None, solid_bc="dirichlet", wind=None, peclet=0.0, anchor=None):
    if bc not in BCS:
        raise ValueError(f"unknown boundary condition {bc!r}")
    offsets = stencil_offsets(shape)
    periodic = (bc in ("periodic_x", "channel"), False, False)
    neumann = bc in ("neumann", "channel")
    idx = _grid(shape)
    solid = np.zeros(shape.N, dtype=bool) if solid is None else np.asarray(solid, dtype=bool).ravel()
    bands = np.zeros((len(offsets), shape.N))
    diag = bands[0]
    for d, off in enumerate(offsets[1:], start=1):
        axis = next(a for a in range(3) if off[a])
        if shape.dims[axis] == 1:
            continue
        nb, inside = _neighbor(shape, idx, off, periodic)
        open_face = inside & ~solid & ~solid[nb]
        bands[d][open_face] = -1.0
        # boundary face: Dirichlet keeps the diagonal contribution, Neumann drops it
        face_diag = open_face.astype(float)
        if not neumann:
            face_diag[~inside & ~solid] = 1.0
        if solid_bc == "dirichlet":
            face_diag[inside & ~solid & solid[nb]] = 1.0
        diag += face_diag
    if peclet:
        w = np.asarray(wind, dtype=float)
        w = w / np.linalg.norm(w)
        for axis in range(3):
            if w[axis] == 0.0 or shape.dims[axis] == 1:
                continue
            up = [0, 0, 0]
            up[axis] = -1 if w[axis] > 0 else 1
            d = offsets.index(tuple(up))
            c = peclet * abs(w[axis])
            nb, inside = _neighbor(shape, idx, up, periodic)
            fluid = ~solid
            diag[fluid] += c
            couple = inside & fluid & ~solid[nb]
            bands[d][couple] -= c
    diag[solid] = 1.0
    meta = {"bc": bc}
    singular = neumann and not (solid_bc == "dirichlet" and solid.any())
    if bc == "periodic_x" and all(n == 1 for n in shape.dims[1:]):
        singular = True
    if singular or anchor is not None:
        a = int(np.flatnonzero(~solid)[0]) if anchor is None else int(anchor)
        for d, off in enumerate(offsets[1:], start=1):
            bands[d][a] = 0.0
            nb, inside = _neighbor(shape, idx, off, periodic)
            # rows whose neighbor in direction off is the anchor
            rows = np.flatnonzero(inside & (nb == a))
            bands[d][rows] = 0.0
        meta["anchor"] = a
    return StencilMatrix(shape, offsets, bands, periodic, meta)


def make_poisson(shape: GridShape, bc: str = "dirichlet") -> StencilMatrix:
    """Standard 5/7-point Laplacian ``-h^2 Δ`` (diagonal positive).

    ``bc`` is one of ``dirichlet``, ``periodic_x`` (x wraps, other axes
    Dirichlet), ``neumann`` or ``channel`` (x wraps, other axes Neumann).
    Singular variants pin one cell; its index is stored in ``meta['anchor']``.
    """
    return _assemble(shape, bc)


def make_convection_diffusion(shape: GridShape, peclet: float, wind=(1.0, 0.0, 0.0), bc: str = "dirichlet") -> StencilMatrix:
    """Poisson plus first-order upwind convection with cell Peclet number ``peclet``."""
    if peclet < 0:
        raise ValueError("peclet must be non-negative")
    wind = tuple(wind) + (0.0,) * (3 - len(wind))
    if peclet == 0:
        return make_poisson(shape, bc)
    A = _assemble(shape, bc, wind=wind, peclet=peclet)
    A.meta.update(peclet=peclet, wind=wind)
    return A


def fluid_components(fluid: np.ndarray, wrap_x: bool = False) -> np.ndarray:
    """Face-connected component labels (0 for solid) of a (nz, ny, nx) mask."""
    labels, n = ndimage.label(fluid)
    if wrap_x and n > 1:
        # merge components that touch across the periodic x seam
        parent = np.arange(n + 1)

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for a, b in zip(labels[..., 0].ravel(), labels[..., -1].ravel()):
            if a and b:
                parent[find(a)] = find(b)
        roots = np.array([find(a) for a in range(n + 1)])
        _, labels = np.unique(roots[labels], return_inverse=True)
        labels = labels.reshape(fluid.shape)
    return labels


def is_connected(fluid: np.ndarray, wrap_x: bool = False) -> bool:
    """Face connectivity of the True cells of a (nz, ny, nx) mask."""
    if not fluid.any():
        return False
    return int(fluid_components(fluid, wrap_x).max()) == 1


def random_solid(shape: GridShape, porosity: float, seed, wrap_x: bool = False, tries: int = 10,
                 min_connected: float = 0.9) -> np.ndarray:
    """Random solid-cell mask whose fluid part is face connected.

    Fluid pockets cut off from the largest fluid component are filled in as
    solid.  A draw is rejected when that component holds less than
    ``min_connected`` of the fluid cells.
    """
    if not 0.2 < porosity <= 1.0:
        raise ValueError("porosity must lie in (0.2, 1]")
    rng = np.random.default_rng(seed)
    grid3 = (shape.nz, shape.ny, shape.nx)
    for _ in range(tries):
        fluid = rng.random(grid3) < porosity
        if not fluid.any():
            continue
        labels = fluid_components(fluid, wrap_x)
        sizes = np.bincount(labels.ravel())
        sizes[0] = 0
        main = int(np.argmax(sizes))
        if sizes[main] >= min_connected * fluid.sum():
            return (labels != main).ravel()
    raise GenerationError(f"no connected fluid domain after {tries} tries (porosity={porosity}, seed={seed})")


def make_porous_mask(shape: GridShape, porosity: float, seed=0, peclet: float = 0.0, wind=(1.0, 0.0, 0.0)) -> StencilMatrix:
    """Poisson (or convection-diffusion) with randomly masked solid cells.

    Solid cells get identity rows and lose their couplings to fluid cells;
    fluid rows keep their diagonal, so solid neighbors act as zero Dirichlet
    values.
    """
    if porosity == 1.0:
        A = make_convection_diffusion(shape, peclet, wind)
        A.meta.update(porosity=1.0, seed=seed)
        return A
    solid = random_solid(shape, porosity, seed)
    wind = tuple(wind) + (0.0,) * (3 - len(wind))
    A = _assemble(shape, "dirichlet", solid=solid, wind=wind, peclet=peclet)
    A.meta.update(porosity=porosity, seed=seed, solid=np.flatnonzero(solid).tolist())
    return A


def skew_dominated_matrix(shape: GridShape, shift: float = 1e-5, speed: float = 1.0) -> StencilMatrix:
    """Central-difference convection plus a tiny diagonal shift.

    ``x^T A x = shift * ||x||^2`` for every ``x``, so BiCGStab with
    ``r~ = r_0`` meets ``alpha ~ 1 / shift`` in its first step.  Used to
    provoke the residual blow-up that marks a failed hybrid switch.
    """
    offsets = stencil_offsets(shape)
    idx = _grid(shape)
    bands = np.zeros((len(offsets), shape.N))
    bands[0][:] = shift
    for d, off in enumerate(offsets[1:], start=1):
        axis = next(a for a in range(3) if off[a])
        if shape.dims[axis] == 1:
            continue
        _, inside = _neighbor(shape, idx, off, (False, False, False))
        sign = 1.0 if sum(off) > 0 else -1.0
        bands[d][inside] = 0.5 * speed * sign
    return StencilMatrix(shape, offsets, bands, meta={"kind": "skew_dominated", "shift": shift})


@dataclass
class SystemSequence:
    """Fixed matrix with an ordered stream of right-hand sides."""

    A: StencilMatrix
    rhs: list
    matrix_epoch: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rhs = [np.asarray(b, dtype=np.float64) for b in self.rhs]
        for b in self.rhs:
            if b.shape != (self.A.N,):
                raise ValueError("right-hand side does not conform to the matrix")

    def __len__(self):
        return len(self.rhs)

    def stream(self):
        """Generator of right-hand sides; sent solutions are ignored."""
        for b in self.rhs:
            yield b


def perturbed_sequence(A: StencilMatrix, steps: int, seed=0, amplitude: float = 0.01, drift: float = 0.0) -> SystemSequence:
    """``b_t = b + amplitude * sin(t) * p (+ drift * t * q_t)`` for ``t = 1..steps``.

    ``b``, ``p`` and the drift directions ``q_t`` are seeded normal vectors;
    ``p`` and ``q_t`` are scaled to ``||b||``.
    """
    rng = np.random.default_rng(seed)
    b = rng.standard_normal(A.N)
    p = rng.standard_normal(A.N)
    p *= np.linalg.norm(b) / np.linalg.norm(p)
    rhs = []
    for t in range(1, steps + 1):
        bt = b + amplitude * np.sin(t) * p
        if drift:
            q = rng.standard_normal(A.N)
            bt = bt + drift * np.linalg.norm(b) / np.linalg.norm(q) * q
        rhs.append(bt)
    meta = {"generator": "perturbed", "seed": seed, "amplitude": amplitude, "drift": drift}
    return SystemSequence(A, rhs, meta=meta)


def save_sequence(seq: SystemSequence, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_matrix(seq.A, d / "matrix.txt")
    for t, b in enumerate(seq.rhs):
        save_vector(b, d / f"b_{t:04d}.vec")
    meta = {**seq.meta, "matrix_epoch": seq.matrix_epoch, "steps": len(seq)}
    lines = [f"{k} = {v}" for k, v in meta.items() if not isinstance(v, (list, dict))]
    (d / "meta").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return d


def load_sequence(directory) -> SystemSequence:
    d = Path(directory)
    A = load_matrix(d / "matrix.txt")
    rhs = [load_vector(p) for p in sorted(d.glob("b_*.vec"))]
    meta = {}
    if (d / "meta").exists():
        for ln in (d / "meta").read_text(encoding="utf-8").splitlines():
            if "=" in ln:
                k, v = (s.strip() for s in ln.split("=", 1))
                meta[k] = v
    epoch = int(meta.pop("matrix_epoch", 0))
    return SystemSequence(A, rhs, epoch, meta)
