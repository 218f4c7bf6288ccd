import numpy as np
import pytest
import hypothesis.strategies as st
from hypothesis import given, settings
from scipy import special

from ambiforge import sphere
from ambiforge.sphere import (Direction, ShIndex, SphericalGrid, acn, acn_to_nm, eval_real_sh, exact_weights,
                              n3d_to_sn3d, order_of_channels, radial_term, uniform_grid)

mpmath = pytest.importorskip("mpmath")

angles = st.tuples(st.floats(0, 2 * np.pi), st.floats(0, np.pi))


def closed_form_sh(az, incl):
    """Real N3D harmonics up to order 2 written out by hand (ACN order)."""
    s, c = np.sin(incl), np.cos(incl)
    k1 = np.sqrt(3 / (4 * np.pi))
    return np.array([
        np.full_like(az, 1 / np.sqrt(4 * np.pi)),
        k1 * s * np.sin(az),
        k1 * c,
        k1 * s * np.cos(az),
        np.sqrt(15 / (16 * np.pi)) * s**2 * np.sin(2 * az),
        np.sqrt(15 / (4 * np.pi)) * s * c * np.sin(az),
        np.sqrt(5 / (16 * np.pi)) * (3 * c**2 - 1),
        np.sqrt(15 / (4 * np.pi)) * s * c * np.cos(az),
        np.sqrt(15 / (16 * np.pi)) * s**2 * np.cos(2 * az),
    ])


def test_acn_roundtrip():
    for n in range(6):
        for m in range(-n, n + 1):
            assert acn_to_nm(acn(n, m)) == (n, m)
            assert ShIndex(n, m).acn == acn(n, m)
    assert [acn(1, -1), acn(1, 0), acn(1, 1)] == [1, 2, 3]


def test_invalid_indices():
    with pytest.raises(ValueError):
        ShIndex(1, 2)
    with pytest.raises(ValueError):
        Direction(0.0, 4.0)
    with pytest.raises(ValueError):
        order_of_channels(5)
    with pytest.raises(ValueError):
        eval_real_sh(sphere.MAX_SH_ORDER + 1, np.zeros(1), np.zeros(1))


def test_low_order_values():
    Y = eval_real_sh(1, np.array([0.0, 0.0]), np.array([0.0, np.pi / 2]))
    assert Y[0, 0] == pytest.approx(0.2820947917738781, abs=1e-12)
    assert Y[2, 0] == pytest.approx(0.4886025119029199, abs=1e-12)
    # front (+x) gives a positive X dipole, no Condon-Shortley sign
    assert Y[3, 1] > 0 and abs(Y[1, 1]) < 1e-15


@settings(max_examples=50, deadline=None)
@given(st.lists(angles, min_size=1, max_size=8))
def test_matches_closed_form(dirs):
    az, incl = np.array(dirs).T
    assert np.allclose(eval_real_sh(2, az, incl), closed_form_sh(az, incl), atol=1e-12)


def test_accepts_directions_and_grids():
    grid = uniform_grid(10)
    Y = eval_real_sh(2, grid)
    assert Y.shape == (9, 10)
    assert np.allclose(eval_real_sh(2, grid.directions), Y)


def test_orthonormality_on_exact_grid():
    grid = uniform_grid(1296, exact_order=8)
    Y = eval_real_sh(4, grid)
    gram = (Y * grid.weights) @ Y.T
    assert np.abs(gram - np.eye(25)).max() < 1e-10
    assert grid.weights.sum() == pytest.approx(4 * np.pi, abs=1e-12)


def test_equal_weight_spiral_is_only_approximate():
    grid = uniform_grid(1296)
    Y = eval_real_sh(4, grid)
    err = np.abs((Y * grid.weights) @ Y.T - np.eye(25)).max()
    assert 1e-6 < err < 1e-2


@settings(max_examples=30, deadline=None)
@given(angles, angles)
def test_addition_theorem(a, b):
    Ya = eval_real_sh(6, np.array([a[0]]), np.array([a[1]]))[:, 0]
    Yb = eval_real_sh(6, np.array([b[0]]), np.array([b[1]]))[:, 0]
    cosg = float(Direction(*a).to_vector() @ Direction(*b).to_vector())
    orders = order_of_channels(49)
    for n in range(7):
        lhs = np.sum((Ya * Yb)[orders == n])
        rhs = (2 * n + 1) / (4 * np.pi) * special.eval_legendre(n, cosg)
        assert lhs == pytest.approx(rhs, abs=1e-10)


def test_vector_roundtrip():
    grid = uniform_grid(50)
    az, incl = sphere.vectors_to_directions(grid.vectors())
    assert np.allclose(np.cos(az - grid.azimuth), 1) and np.allclose(incl, grid.inclination)
    assert np.allclose(np.linalg.norm(grid.vectors(), axis=1), 1)


def test_nearest():
    grid = uniform_grid(100)
    assert np.array_equal(grid.nearest(grid.vectors() * 3.0), np.arange(100))


def test_grid_validation():
    with pytest.raises(ValueError):
        SphericalGrid(np.zeros(3), np.zeros(2))
    with pytest.raises(ValueError):
        SphericalGrid(np.zeros(2), np.zeros(2), weights=np.array([1.0, -1.0]))
    with pytest.raises(ValueError):
        uniform_grid(0)
    with pytest.raises(ValueError):
        exact_weights(uniform_grid(10), 4)


def test_sn3d_gains():
    g = n3d_to_sn3d(2)
    assert np.allclose(g, 1 / np.sqrt([1, 3, 3, 3, 5, 5, 5, 5, 5]))


def _mp_radial(n, kr, model):
    mp = mpmath
    mp.mp.dps = 40
    x = mp.mpf(kr)

    def j(k):
        return mp.sqrt(mp.pi / (2 * x)) * mp.besselj(k + mp.mpf(1) / 2, x)

    def y(k):
        return mp.sqrt(mp.pi / (2 * x)) * mp.bessely(k + mp.mpf(1) / 2, x)

    def deriv(f, k):
        return f(k - 1) - (k + 1) / x * f(k) if k > 0 else -f(1)

    b = j(n)
    if model == "rigid":
        h = j(n) - 1j * y(n)
        dh = deriv(j, n) - 1j * deriv(y, n)
        b = j(n) - deriv(j, n) / dh * h
    return complex(4 * mp.pi * (1j) ** n * b)


@pytest.mark.parametrize("model", ["open", "rigid"])
@pytest.mark.parametrize("n", [0, 1, 2, 4, 7])
@pytest.mark.parametrize("freq", [50.0, 700.0, 4000.0, 16000.0])
def test_radial_term_against_mpmath(model, n, freq):
    r, c = 0.09, 343.0
    kr = 2 * np.pi * freq * r / c
    got = radial_term(n, freq, r, c, model)
    want = _mp_radial(n, kr, model)
    assert abs(got - want) <= 1e-9 * max(abs(want), 1e-6)


def test_rigid_radial_limit_at_dc():
    b = radial_term(np.arange(4), 0.0, 0.09, model="rigid")
    assert b[0] == pytest.approx(4 * np.pi) and np.all(b[1:] == 0)


def test_radial_term_errors():
    with pytest.raises(ValueError):
        radial_term(-1, 100.0, 0.1)
    with pytest.raises(ValueError):
        radial_term(1, 100.0, 0.0)
    with pytest.raises(ValueError):
        radial_term(1, 100.0, 0.1, model="cardioid")
