import numpy as np
import pytest

from congested_transport.errors import InputFormatError, ShapeMismatchError
from congested_transport.grids import (
    Grid,
    ScalarField,
    VectorField,
    divergence,
    load_scalar_csv,
    load_vector_csv,
    save_scalar_csv,
    save_vector_csv,
)


def test_grid_validation():
    with pytest.raises(InputFormatError):
        Grid(nx=1, ny=4, h=0.1)
    with pytest.raises(InputFormatError):
        Grid(nx=4, ny=4, h=0.0)
    g = Grid(nx=4, ny=1, h=0.25)  # one-dimensional grids are allowed
    assert g.extent == (1.0, 0.25)


def test_vector_field_boundary_enforced():
    g = Grid(nx=3, ny=3, h=1.0)
    vx = np.zeros((4, 3))
    vy = np.zeros((3, 4))
    vx[0, 1] = 1.0
    with pytest.raises(ShapeMismatchError):
        VectorField(vx, vy, g)


def test_divergence_zero_field():
    g = Grid(nx=5, ny=4, h=0.5)
    assert np.all(divergence(VectorField.zeros(g), g).values == 0.0)


def test_divergence_uniform_interior_flux():
    g = Grid(nx=6, ny=3, h=0.5)
    vx = np.zeros((7, 3))
    vx[1:-1, :] = 2.0
    v = VectorField(vx, np.zeros((6, 4)), g)
    div = divergence(v, g).values
    # telescoping: only the first and last columns see the jump
    assert np.allclose(div[0, :], 2.0 / g.h)
    assert np.allclose(div[-1, :], -2.0 / g.h)
    assert np.allclose(div[1:-1, :], 0.0)
    assert abs(div.sum() * g.cell_area) <= 1e-14


def test_divergence_of_discrete_gradient():
    # v = grad of u(x, y) = x^2/2 has divergence one; the 5-point stencil
    # reproduces it away from the boundary with O(h) accuracy at worst
    g = Grid(nx=32, ny=8, h=1.0 / 32)
    xc, yc = g.cell_centers()
    u = 0.5 * xc ** 2
    vx = np.zeros((33, 8))
    vx[1:-1, :] = (u[1:, :] - u[:-1, :]) / g.h
    v = VectorField(vx, np.zeros((32, 9)), g)
    div = divergence(v, g).values
    interior = div[1:-1, :]
    assert np.abs(interior - 1.0).max() <= g.h


def test_conservation_random_field():
    g = Grid(nx=9, ny=7, h=0.3)
    rng = np.random.default_rng(0)
    vx = np.zeros((10, 7))
    vy = np.zeros((9, 8))
    vx[1:-1, :] = rng.standard_normal((8, 7))
    vy[:, 1:-1] = rng.standard_normal((9, 6))
    div = divergence(VectorField(vx, vy, g), g)
    assert abs(div.values.sum() * g.cell_area) <= 1e-12


def test_scalar_csv_round_trip(tmp_path):
    g = Grid(nx=5, ny=3, h=0.2)
    rng = np.random.default_rng(1)
    f = ScalarField(rng.random((5, 3)), g)
    path = tmp_path / "field.csv"
    save_scalar_csv(f, path)
    raw = np.loadtxt(path, delimiter=",", ndmin=2)
    assert raw.shape == (3, 5)  # ny rows x nx columns
    back = load_scalar_csv(path)
    assert back.grid == g
    assert np.allclose(back.values, f.values)


def test_vector_csv_round_trip(tmp_path):
    g = Grid(nx=4, ny=3, h=0.5)
    rng = np.random.default_rng(2)
    vx = np.zeros((5, 3))
    vy = np.zeros((4, 4))
    vx[1:-1, :] = rng.random((3, 3))
    vy[:, 1:-1] = rng.random((4, 2))
    v = VectorField(vx, vy, g)
    save_vector_csv(v, tmp_path / "vx.csv", tmp_path / "vy.csv")
    back = load_vector_csv(tmp_path / "vx.csv", tmp_path / "vy.csv")
    assert np.allclose(back.vx, vx)
    assert np.allclose(back.vy, vy)


def test_scalar_mass_and_constant():
    g = Grid(nx=10, ny=10, h=0.1)
    one = ScalarField.constant(g, 1.0)
    assert one.total_mass == pytest.approx(1.0)
