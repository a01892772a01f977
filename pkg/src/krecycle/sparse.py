"""Structured-grid matrices in diagonal (banded) storage.

Cells are ordered lexicographically with x varying fastest, so cell
``(i, j, k)`` has flat index ``i + nx * (j + ny * k)``.  A matrix is a list of
integer offsets plus one contiguous coefficient array per offset.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "GridShape",
    "StencilMatrix",
    "DimensionError",
    "OracleSizeError",
    "matvec",
    "residual",
    "to_dense",
    "to_csr",
    "matvec_count",
    "save_matrix",
    "load_matrix",
    "save_vector",
    "load_vector",
    "DENSE_ORACLE_CAP",
]

DENSE_ORACLE_CAP = 4096
VALID_STENCIL_SIZES = (5, 7, 19)


class DimensionError(ValueError):
    """Operand lengths do not match the matrix size."""


class OracleSizeError(ValueError):
    """Dense expansion requested for a matrix above the oracle cap."""


@dataclass(frozen=True)
class GridShape:
    nx: int
    ny: int = 1
    nz: int = 1

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")

    @property
    def N(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    def index(self, i: int, j: int = 0, k: int = 0) -> int:
        return i + self.nx * (j + self.ny * k)


class _Counter(threading.local):
    count = 0


_counter = _Counter()


def matvec_count() -> int:
    """Number of counted matrix-vector products performed on this thread."""
    return _counter.count


def _shifted(x3: np.ndarray, off: tuple[int, int, int], periodic) -> np.ndarray:
    # out[k, j, i] = x3[k + dz, j + dy, i + dx]; zero (or wrapped) off-grid
    out = x3
    for axis, d in ((2, off[0]), (1, off[1]), (0, off[2])):
        if d == 0:
            continue
        per = periodic[2 - axis]
        if per:
            out = np.roll(out, -d, axis=axis)
            continue
        n = out.shape[axis]
        res = np.zeros_like(out)
        if abs(d) < n:
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if d > 0:
                src[axis] = slice(d, n)
                dst[axis] = slice(0, n - d)
            else:
                src[axis] = slice(0, n + d)
                dst[axis] = slice(-d, n)
            res[tuple(dst)] = out[tuple(src)]
        out = res
    return out


@dataclass(frozen=True, eq=False)
class StencilMatrix:
    """Sparse matrix on a structured grid stored by stencil bands.

    Parameters
    ----------
    shape : GridShape
    offsets : sequence of (dx, dy, dz)
        Exactly one offset must be ``(0, 0, 0)``.
    bands : array of shape (len(offsets), N)
        ``bands[d, i]`` multiplies ``x[neighbor(i, offsets[d])]``.
    periodic : (bool, bool, bool)
        Axes on which neighbor indices wrap around.  On the other axes any
        coefficient that points outside the grid must be zero.
    meta : dict
        Free-form generator metadata (anchor cell, seed, ...).
    """

    shape: GridShape
    offsets: tuple
    bands: np.ndarray
    periodic: tuple = (False, False, False)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        offsets = tuple(tuple(int(c) for c in o) for o in self.offsets)
        if any(len(o) != 3 for o in offsets):
            raise ValueError("offsets must be 3-tuples")
        if len(offsets) not in VALID_STENCIL_SIZES:
            raise ValueError(f"stencil must have 5, 7 or 19 offsets, got {len(offsets)}")
        if len(set(offsets)) != len(offsets):
            raise ValueError("duplicate stencil offsets")
        if offsets.count((0, 0, 0)) != 1:
            raise ValueError("exactly one offset must be the diagonal (0, 0, 0)")
        bands = np.array(self.bands, dtype=np.float64)
        if bands.shape != (len(offsets), self.shape.N):
            raise ValueError(f"bands must have shape {(len(offsets), self.shape.N)}, got {bands.shape}")
        if not np.all(np.isfinite(bands)):
            raise ValueError("non-finite band coefficient")
        periodic = tuple(bool(p) for p in self.periodic)
        diag = bands[offsets.index((0, 0, 0))]
        if np.any(diag == 0.0):
            raise ValueError("diagonal band has a zero entry")
        # boundary truncation: coefficients that would reach off-grid are zero
        ones = np.ones(self.shape.N)
        for o, band in zip(offsets, bands):
            inside = _shifted(ones.reshape(self._grid3), o, periodic).ravel()
            if np.any(band[inside == 0.0] != 0.0):
                raise ValueError(f"offset {o} has nonzero coefficients pointing outside the grid")
        bands.setflags(write=False)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "bands", bands)
        object.__setattr__(self, "periodic", periodic)

    @property
    def _grid3(self) -> tuple[int, int, int]:
        s = self.shape
        return (s.nz, s.ny, s.nx)

    @property
    def N(self) -> int:
        return self.shape.N

    @property
    def diagonal(self) -> np.ndarray:
        return self.bands[self.offsets.index((0, 0, 0))]

    def dot(self, x: np.ndarray) -> np.ndarray:
        """Uncounted product ``A @ x`` (used inside preconditioners)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.N,):
            raise DimensionError(f"vector of length {x.shape} does not match N={self.N}")
        x3 = x.reshape(self._grid3)
        y = np.zeros(self.N)
        for o, band in zip(self.offsets, self.bands):
            if o == (0, 0, 0):
                y += band * x
            else:
                y += band * _shifted(x3, o, self.periodic).ravel()
        return y

    def with_bands(self, bands, **meta) -> "StencilMatrix":
        return StencilMatrix(self.shape, self.offsets, bands, self.periodic, {**self.meta, **meta})

    def equals(self, other: "StencilMatrix") -> bool:
        return (
            self.shape == other.shape
            and self.offsets == other.offsets
            and self.periodic == other.periodic
            and np.array_equal(self.bands, other.bands)
        )


def matvec(A: StencilMatrix, x: np.ndarray) -> np.ndarray:
    """Return ``A @ x``; counts one matrix-vector product."""
    y = A.dot(x)
    _counter.count += 1
    return y


def residual(A: StencilMatrix, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return ``b - A @ x``; counts one matrix-vector product."""
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (A.N,):
        raise DimensionError(f"rhs of length {b.shape} does not match N={A.N}")
    return b - matvec(A, x)


def _coo(A: StencilMatrix):
    s = A.shape
    k, j, i = np.meshgrid(np.arange(s.nz), np.arange(s.ny), np.arange(s.nx), indexing="ij")
    rows, cols, vals = [], [], []
    for o, band in zip(A.offsets, A.bands):
        ii, jj, kk = i + o[0], j + o[1], k + o[2]
        ok = np.ones(ii.shape, dtype=bool)
        coords = []
        for c, n, per in zip((ii, jj, kk), s.dims, A.periodic):
            if per:
                c = c % n
            else:
                ok &= (c >= 0) & (c < n)
            coords.append(c)
        col = coords[0] + s.nx * (coords[1] + s.ny * coords[2])
        ok = ok.ravel() & (band != 0.0)
        rows.append(np.arange(A.N)[ok])
        cols.append(col.ravel()[ok])
        vals.append(band[ok])
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def to_csr(A: StencilMatrix) -> sp.csr_matrix:
    """Compressed sparse row copy (duplicates from periodic wrap are summed)."""
    r, c, v = _coo(A)
    return sp.csr_matrix((v, (r, c)), shape=(A.N, A.N))


def to_dense(A: StencilMatrix, cap: int = DENSE_ORACLE_CAP) -> np.ndarray:
    """Dense ``N x N`` expansion, for use as a test oracle only."""
    if A.N > cap:
        raise OracleSizeError(f"N={A.N} exceeds dense oracle cap {cap}")
    D = np.zeros((A.N, A.N))
    r, c, v = _coo(A)
    np.add.at(D, (r, c), v)
    return D


def _fmt(v: float) -> str:
    return repr(float(v))


def save_matrix(A: StencilMatrix, path) -> None:
    lines = [f"stencil {A.shape.nx} {A.shape.ny} {A.shape.nz} {len(A.offsets)}"]
    if any(A.periodic):
        lines.append("periodic " + " ".join(str(int(p)) for p in A.periodic))
    lines += [" ".join(str(c) for c in o) for o in A.offsets]
    lines += [" ".join(_fmt(v) for v in row) for row in A.bands.T]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_matrix(path) -> StencilMatrix:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    head = lines[0].split()
    if head[0] != "stencil" or len(head) != 5:
        raise ValueError(f"{path}: bad header {lines[0]!r}")
    nx, ny, nz, n_off = (int(t) for t in head[1:])
    pos = 1
    periodic = (False, False, False)
    if lines[pos].startswith("periodic"):
        periodic = tuple(bool(int(t)) for t in lines[pos].split()[1:])
        pos += 1
    offsets = [tuple(int(t) for t in lines[pos + d].split()) for d in range(n_off)]
    pos += n_off
    shape = GridShape(nx, ny, nz)
    rows = [[float(t) for t in ln.split()] for ln in lines[pos:pos + shape.N]]
    if len(rows) != shape.N:
        raise ValueError(f"{path}: expected {shape.N} coefficient rows, found {len(rows)}")
    return StencilMatrix(shape, offsets, np.array(rows).T, periodic)


def save_vector(v: np.ndarray, path) -> None:
    v = np.asarray(v, dtype=np.float64)
    Path(path).write_text(f"vector {v.size}\n" + "".join(_fmt(x) + "\n" for x in v), encoding="utf-8")


def load_vector(path) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    head = lines[0].split()
    if head[0] != "vector":
        raise ValueError(f"{path}: bad header {lines[0]!r}")
    n = int(head[1])
    return np.array([float(t) for t in lines[1:1 + n]])
