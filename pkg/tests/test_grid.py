import numpy as np
import pytest

from infogamma import expr as ex
from infogamma.errors import DimensionMismatch
from infogamma.grid import (
    Grid, MatrixField, ScalarField, VectorField, fd_gradient, integrate, read_csv, sample,
    sample_vector, write_csv,
)

HALF_SQ = ex.parse("(x1^2 + x2^2)/2", 2)


def test_constant_sample():
    g = Grid.uniform([-1, -1], [1, 1], 8)
    f = sample(ex.const(1.0), g)
    assert np.array_equal(f.values, np.ones((8, 8)))


def test_cell_center_value():
    g = Grid.uniform([-1, -1], [1, 1], 4)
    f = sample(HALF_SQ, g)
    # centers are -0.75, -0.25, 0.25, 0.75; (0.25, 0.25) is cell (2, 2)
    assert np.allclose(g.center((2, 2)), [0.25, 0.25])
    assert f.values[2, 2] == pytest.approx(0.0625)
    assert np.allclose(g.center((3, 3)), [0.75, 0.75])
    assert f.values[3, 3] == pytest.approx(0.5625)


def test_odd_symmetry():
    g = Grid.uniform([-1, -1], [1, 1], 10)
    f = sample(ex.var(1), g).values
    assert np.allclose(f, -f[::-1, :], rtol=0, atol=1e-15)
    assert abs(integrate(sample(ex.var(1), g))) <= 1e-14


def test_integrate_volume():
    g = Grid.uniform([-1, -1], [1, 1], 7)
    assert integrate(sample(ex.ONE, g)) == pytest.approx(4.0, abs=1e-14)


def test_quadrature_converges_at_second_order():
    errs = []
    for n in (16, 32, 64):
        g = Grid.uniform([-1, -1], [1, 1], n)
        errs.append(abs(integrate(sample(HALF_SQ, g)) - 4.0 / 3.0))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(np.abs(ratios - 4.0) <= 1.0)


def test_quadrature_order_smooth_function():
    f = ex.parse("exp(x1 + x2)", 2)
    exact = (np.e - 1 / np.e) ** 2
    errs = [abs(integrate(sample(f, Grid.uniform([-1, -1], [1, 1], n))) - exact) for n in (16, 32, 64)]
    r = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(np.abs(r - 4.0) <= 1.0)


def test_fd_gradient_of_linear_field():
    g = Grid.uniform([-1, -2], [1, 2], [9, 13])
    grad = fd_gradient(sample(ex.var(1), g)).values
    assert np.max(np.abs(grad[0] - 1.0)) <= 1e-12
    assert np.max(np.abs(grad[1])) <= 1e-12


def test_fd_gradient_exact_on_affine_including_edges():
    g = Grid.uniform([0, 0], [1, 3], [6, 5])
    f = sample(ex.parse("2*x1 - 3*x2 + 1", 2), g)
    grad = fd_gradient(f).values
    assert np.allclose(grad[0], 2.0, atol=1e-12)
    assert np.allclose(grad[1], -3.0, atol=1e-12)


def test_fd_gradient_second_order():
    errs = []
    for n in (16, 32, 64):
        g = Grid.uniform([-1, -1], [1, 1], n)
        grad = fd_gradient(sample(HALF_SQ, g)).values
        errs.append(np.max(np.abs(grad - g.points())))
    # quadratic fields are differentiated exactly by second-order stencils
    assert max(errs) <= 1e-12
    errs = []
    f = ex.parse("sin(2*x1)*x2", 2)
    for n in (16, 32, 64):
        g = Grid.uniform([-1, -1], [1, 1], n)
        x = g.points()
        grad = fd_gradient(sample(f, g)).values
        errs.append(np.max(np.abs(grad[0] - 2 * np.cos(2 * x[0]) * x[1])))
    r = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(np.abs(r - 4.0) <= 1.0)


def test_constant_gradient_is_zero():
    g = Grid.uniform([-1, -1], [1, 1], 5)
    assert np.all(fd_gradient(sample(ex.const(3.0), g)).values == 0.0)


def test_discrete_integration_by_parts():
    f = ex.parse("sin(x1) + x2^2", 2)
    h = ex.parse("cos(x1*x2)", 2)
    errs = []
    for n in (32, 64, 128):
        g = Grid.uniform([-1, -1], [1, 1], n)
        fv, hv = sample(f, g), sample(h, g)
        lhs = integrate(ScalarField(g, fv.values * fd_gradient(hv).values[0]))
        lhs += integrate(ScalarField(g, hv.values * fd_gradient(fv).values[0]))
        # boundary term: int over x2 of (f h)(1, x2) - (f h)(-1, x2)
        x2 = g.axes[1]
        fh = lambda a: ex.evaluate(f, np.stack([np.full_like(x2, a), x2])) * ex.evaluate(
            h, np.stack([np.full_like(x2, a), x2]))
        bnd = float(np.sum(fh(1.0) - fh(-1.0)) * g.h[1])
        errs.append(abs(lhs - bnd))
    r = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(r > 3.0)


def test_closed_grid_centers_hit_the_box():
    g = Grid.closed([-1, -1], [1, 1], 5)
    assert np.allclose(g.axes[0], [-1, -0.5, 0, 0.5, 1])


def test_too_few_cells():
    with pytest.raises(ValueError):
        Grid.uniform([0], [1], 3)


def test_field_shape_mismatch():
    g = Grid.uniform([0, 0], [1, 1], 4)
    with pytest.raises(DimensionMismatch):
        ScalarField(g, np.zeros((4, 5)))
    with pytest.raises(DimensionMismatch):
        sample(ex.var(3), g)


def test_matrix_field_symmetry_bitwise():
    g = Grid.uniform([0, 0, 0], [1, 1, 1], 4)
    A = np.random.default_rng(1).normal(size=(3, 3, 4, 4, 4))
    M = MatrixField(g, A + np.swapaxes(A, 0, 1))
    for i in range(3):
        for j in range(3):
            assert np.array_equal(M.entry(i, j), M.entry(j, i))
    assert np.array_equal(M.full(), np.swapaxes(M.full(), 0, 1))


def test_csv_round_trip(tmp_path):
    g = Grid.uniform([-1, 0], [1, 2], [4, 6])
    f = sample(ex.parse("exp(x1)*sin(x2) + 1/3", 2), g)
    write_csv(f, tmp_path / "f.csv")
    back = read_csv(tmp_path / "f.csv", g)
    assert np.array_equal(back[0], f.values)
    header = (tmp_path / "f.csv").read_text().splitlines()[0]
    assert header == "x1,x2,value"

    v = sample_vector([ex.var(1), ex.var(2)], g)
    write_csv(v, tmp_path / "v.csv")
    assert np.array_equal(read_csv(tmp_path / "v.csv", g), v.values)
    M = MatrixField(g, np.stack([np.stack([v.values[0], v.values[1]]), np.stack([v.values[1], v.values[0]])]))
    write_csv(M, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "x1,x2,m11,m12,m21,m22"


def test_csv_rows_are_lexicographic(tmp_path):
    g = Grid.uniform([0, 0], [1, 1], 4)
    write_csv(sample(ex.var(1), g), tmp_path / "f.csv")
    rows = np.loadtxt(tmp_path / "f.csv", delimiter=",", skiprows=1)
    assert np.array_equal(rows[:4, 0], np.full(4, 0.125))
    assert np.allclose(rows[:4, 1], [0.125, 0.375, 0.625, 0.875])


def test_fields_are_read_only():
    g = Grid.uniform([0], [1], 4)
    f = ScalarField(g, np.zeros(4))
    with pytest.raises(ValueError):
        f.values[0] = 1.0
    with pytest.raises(DimensionMismatch):
        VectorField(g, np.zeros((2, 4)))
