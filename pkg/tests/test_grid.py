import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sgspde.grid import (
    Field,
    Grid,
    GridMismatchError,
    forward_dft,
    inverse_dft,
    load_field,
    quadrature,
    save_field,
)


def random_field(grid, rng):
    return grid.field(rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape))


@pytest.mark.parametrize("dim", [1, 2])
def test_constant_transforms_to_delta_at_origin(dim):
    grid = Grid(dim, 16, 4.0)
    spec = forward_dft(grid.field(np.ones(grid.shape)))
    assert spec.domain == "xi"
    origin = (grid.n_points // 2,) * dim
    assert spec.values[origin] == pytest.approx((2 * grid.half_width) ** dim, rel=1e-14)
    rest = spec.values.copy()
    rest[origin] = 0
    assert np.max(np.abs(rest)) < 1e-12


@pytest.mark.parametrize("dim,n", [(1, 64), (1, 128), (2, 64)])
def test_gaussian_fourier_pair(dim, n):
    grid = Grid(dim, n, 10.0)
    f = grid.from_function(lambda x: np.exp(-np.sum(x**2, axis=-1) / 2))
    exact = (2 * np.pi) ** (dim / 2) * np.exp(-np.sum(grid.xi**2, axis=-1) / 2)
    got = forward_dft(f).values
    assert np.linalg.norm(got - exact) / np.linalg.norm(exact) < 1e-8


@pytest.mark.parametrize("dim", [1, 2])
def test_forward_inverse_identity(dim, rng):
    grid = Grid(dim, 32, 3.0)
    f = random_field(grid, rng)
    back = inverse_dft(forward_dft(f))
    assert back.domain == "x"
    assert np.max(np.abs(back.values - f.values)) < 1e-12 * np.max(np.abs(f.values))


def test_quadrature_oracles():
    grid = Grid(1, 128, 10.0)
    assert quadrature(grid.field(np.ones(grid.shape))) == pytest.approx(20.0, rel=1e-14)
    gauss = grid.from_function(lambda x: np.exp(-x[..., 0] ** 2))
    assert abs(quadrature(gauss) - np.sqrt(np.pi)) < 1e-10
    odd = grid.from_function(lambda x: x[..., 0] * np.exp(-x[..., 0] ** 2))
    assert abs(quadrature(odd)) < 1e-12


def test_quadrature_needs_spatial_field():
    grid = Grid(1, 8, 1.0)
    with pytest.raises(ValueError):
        quadrature(grid.field(np.ones(8), "xi"))


@given(arrays(np.float64, 32, elements=st.floats(-10, 10)), st.sampled_from([1.0, 3.0, 7.5]))
def test_parseval(values, half_width):
    grid = Grid(1, 32, half_width)
    f = grid.field(values)
    lhs = f.norm()
    rhs = float(grid.spectral_l2_norm(forward_dft(f).values))
    assert rhs == pytest.approx(lhs, rel=1e-12, abs=1e-300)


@given(arrays(np.float64, (8, 8), elements=st.floats(-5, 5)))
def test_quadrature_of_square_is_squared_norm(values):
    grid = Grid(2, 8, 2.0)
    f = grid.field(values)
    q = quadrature(grid.field(np.abs(values) ** 2)).real
    assert q == pytest.approx(f.norm() ** 2, rel=1e-13, abs=1e-300)


def test_field_validation():
    grid = Grid(1, 8, 1.0)
    with pytest.raises(ValueError):
        Field(grid, np.ones(7), "x")
    with pytest.raises(ValueError):
        Field(grid, np.full(8, np.nan), "x")
    with pytest.raises(ValueError):
        Field(grid, np.ones(8), "k")


@pytest.mark.parametrize("args", [(0, 8, 1.0), (1, 7, 1.0), (1, 8, 0.0)])
def test_grid_validation(args):
    with pytest.raises(ValueError):
        Grid(*args)


def test_field_arithmetic_checks_grids():
    a = Grid(1, 8, 1.0).field(np.ones(8))
    b = Grid(1, 8, 2.0).field(np.ones(8))
    with pytest.raises(GridMismatchError):
        a + b
    c = a + a
    assert np.all(c.values == 2)


@pytest.mark.parametrize("domain", ["x", "xi"])
@pytest.mark.parametrize("dim", [1, 2])
def test_save_load_round_trip_is_bit_exact(tmp_path, rng, domain, dim):
    grid = Grid(dim, 16, 2.5)
    f = grid.field(rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape), domain)
    save_field(f, tmp_path / "f")
    g = load_field(tmp_path / "f.bin")
    assert g.grid == grid and g.domain == domain
    assert np.array_equal(g.values, f.values)


def test_nyquist_mask_marks_unpaired_frequencies():
    grid = Grid(2, 8, 1.0)
    m = grid.nyquist_mask
    assert m[0, 3] and m[3, 0] and not m[4, 4]
    assert m.sum() == 2 * 8 - 1
