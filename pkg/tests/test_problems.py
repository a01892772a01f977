import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from krecycle.problems import (
    GenerationError,
    SystemSequence,
    is_connected,
    load_sequence,
    make_convection_diffusion,
    make_poisson,
    make_porous_mask,
    perturbed_sequence,
    save_sequence,
    skew_dominated_matrix,
)
from krecycle.problems import random_solid
from krecycle.sparse import GridShape, to_dense


def test_poisson_1d_two_cells():
    np.testing.assert_array_equal(to_dense(make_poisson(GridShape(2))), [[2.0, -1.0], [-1.0, 2.0]])


def test_poisson_3x3_interior_row():
    D = to_dense(make_poisson(GridShape(3, 3)))
    row = D[4]
    assert row[4] == 4.0
    assert sorted(row[[1, 3, 5, 7]]) == [-1.0] * 4
    assert np.count_nonzero(row) == 5


@pytest.mark.parametrize("shape", [GridShape(5, 4), GridShape(4, 3, 3), GridShape(16, 16), GridShape(16, 16, 16)])
def test_poisson_dirichlet_spd(shape):
    D = to_dense(make_poisson(shape))
    assert np.linalg.norm(D - D.T) == 0.0
    np.linalg.cholesky(D)


def test_poisson_7_point_in_3d():
    A = make_poisson(GridShape(4, 4, 4))
    assert len(A.offsets) == 7
    assert to_dense(A)[21, 21] == 6.0


@pytest.mark.parametrize("bc", ["periodic_x", "neumann", "channel"])
def test_other_bcs_nonsingular_and_symmetric(bc):
    A = make_poisson(GridShape(6, 5), bc)
    D = to_dense(A)
    assert np.linalg.norm(D - D.T) == 0.0
    assert np.linalg.matrix_rank(D) == A.N
    if bc != "periodic_x":
        a = A.meta["anchor"]
        e = np.zeros(A.N)
        e[a] = 1.0
        np.testing.assert_array_equal(D[a], D[a, a] * e)


def test_periodic_x_wraps():
    D = to_dense(make_poisson(GridShape(5, 3), "periodic_x"))
    # cell (0, 1) couples with (4, 1) across the periodic seam
    assert D[5, 9] == -1.0 and D[9, 5] == -1.0


def test_all_periodic_1d_is_anchored():
    A = make_poisson(GridShape(6), "periodic_x")
    assert "anchor" in A.meta
    assert np.linalg.matrix_rank(to_dense(A)) == 6


def test_unknown_bc():
    with pytest.raises(ValueError):
        make_poisson(GridShape(3, 3), "robin")


def test_convdiff_zero_peclet_is_poisson():
    a, b = make_poisson(GridShape(7, 5)), make_convection_diffusion(GridShape(7, 5), 0.0, (0.6, 0.8))
    assert np.array_equal(a.bands, b.bands) and a.offsets == b.offsets


def test_convdiff_asymmetric():
    D = to_dense(make_convection_diffusion(GridShape(8, 8), 10.0, (1.0, 0.0)))
    assert np.linalg.norm(D - D.T) > 0


def test_convdiff_3x3_hand_expansion():
    pe = 10.0
    D = to_dense(make_convection_diffusion(GridShape(3, 3), pe, (1.0, 0.0)))
    E = np.zeros((9, 9))
    for j in range(3):
        for i in range(3):
            p = i + 3 * j
            E[p, p] = 4.0 + pe
            if i > 0:
                E[p, p - 1] = -1.0 - pe
            if i < 2:
                E[p, p + 1] = -1.0
            if j > 0:
                E[p, p - 3] = -1.0
            if j < 2:
                E[p, p + 3] = -1.0
    np.testing.assert_array_equal(D, E)
    rs = D.sum(axis=1).reshape(3, 3)
    # zero on the interior, positive next to the walls
    assert rs[1, 1] == 0.0
    assert np.all(rs[[0, 2], :] > 0) and np.all(rs[:, [0, 2]] > 0)


def test_convdiff_negative_wind_and_validation():
    D = to_dense(make_convection_diffusion(GridShape(4, 1), 2.0, (-1.0, 0.0)))
    assert D[1, 2] == -3.0 and D[1, 0] == -1.0
    with pytest.raises(ValueError):
        make_convection_diffusion(GridShape(4, 4), -1.0)


def test_porous_full_porosity_is_poisson():
    a = make_porous_mask(GridShape(8, 8), 1.0, seed=3)
    assert np.array_equal(a.bands, make_poisson(GridShape(8, 8)).bands)


def test_porous_deterministic_and_identity_rows():
    a = make_porous_mask(GridShape(12, 12), 0.8, seed=5)
    b = make_porous_mask(GridShape(12, 12), 0.8, seed=5)
    assert np.array_equal(a.bands, b.bands)
    solid = a.meta["solid"]
    assert solid
    D = to_dense(a)
    for s in solid:
        e = np.zeros(a.N)
        e[s] = 1.0
        np.testing.assert_array_equal(D[s], e)
        # fluid rows do not reference solid cells either
        assert np.count_nonzero(D[:, s]) == 1
    fluid = np.setdiff1d(np.arange(a.N), solid)
    np.linalg.cholesky(D[np.ix_(fluid, fluid)])


def test_porous_fluid_couplings_unchanged():
    shape = GridShape(10, 10)
    a = to_dense(make_porous_mask(shape, 0.7, seed=1))
    p = to_dense(make_poisson(shape))
    solid = set(make_porous_mask(shape, 0.7, seed=1).meta["solid"])
    for r in range(shape.N):
        for c in range(shape.N):
            if r != c and r not in solid and c not in solid:
                assert a[r, c] == p[r, c]


def test_porous_guards():
    with pytest.raises(ValueError):
        make_porous_mask(GridShape(8, 8), 0.2)
    with pytest.raises(GenerationError):
        random_solid(GridShape(30, 30), 0.25, seed=0)


def test_is_connected():
    m = np.ones((1, 3, 5), dtype=bool)
    m[0, :, 2] = False
    assert not is_connected(m)
    m[0, 1, 2] = True
    assert is_connected(m)
    w = np.zeros((1, 1, 5), dtype=bool)
    w[0, 0, [0, 4]] = True
    assert not is_connected(w) and is_connected(w, wrap_x=True)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), porosity=st.floats(0.55, 0.95))
def test_porous_fluid_is_connected(seed, porosity):
    # either a connected fluid domain or an explicit generation error
    try:
        A = make_porous_mask(GridShape(10, 8), porosity, seed=seed)
    except GenerationError:
        return
    fluid = np.ones(A.N, dtype=bool)
    fluid[A.meta["solid"]] = False
    assert is_connected(fluid.reshape(1, 8, 10))


def test_skew_matrix_quadratic_form(rng):
    A = skew_dominated_matrix(GridShape(6, 6), shift=1e-5)
    D = to_dense(A)
    x = rng.standard_normal(A.N)
    assert x @ D @ x == pytest.approx(1e-5 * (x @ x), rel=1e-6)


def test_perturbed_sequence_deterministic():
    A = make_poisson(GridShape(6, 6))
    s1 = perturbed_sequence(A, 5, seed=9, amplitude=0.1, drift=0.01)
    s2 = perturbed_sequence(A, 5, seed=9, amplitude=0.1, drift=0.01)
    assert len(s1) == 5 and all(np.array_equal(a, b) for a, b in zip(s1.rhs, s2.rhs))
    assert s1.A is A


def test_sequence_rejects_bad_rhs():
    with pytest.raises(ValueError):
        SystemSequence(make_poisson(GridShape(3, 3)), [np.ones(8)])


def test_sequence_dump_round_trip(tmp_path):
    A = make_convection_diffusion(GridShape(5, 4), 1.0)
    seq = perturbed_sequence(A, 3, seed=1)
    d = save_sequence(seq, tmp_path / "seq")
    assert sorted(p.name for p in d.iterdir()) == ["b_0000.vec", "b_0001.vec", "b_0002.vec", "matrix.txt", "meta"]
    back = load_sequence(d)
    assert np.array_equal(back.A.bands, A.bands)
    assert all(np.array_equal(a, b) for a, b in zip(back.rhs, seq.rhs))
    assert back.meta["generator"] == "perturbed" and back.meta["seed"] == "1"
