import math

import numpy as np
import pytest

from nlslab.fields import (
    Field,
    Grid3,
    GridMismatchError,
    gradient,
    h1_seminorm_sq,
    inner,
    l2_norm_sq,
    l4_norm_4,
    laplacian,
    read_snapshot,
    sample,
    workspace_for,
    write_snapshot,
)
from nlslab.ground_state import soliton


def _random_field(grid, seed=0, width=1.0):
    """Smooth, decaying and resolved on the grids below (L >= 4 * width + 1)."""
    rng = np.random.default_rng(seed)
    c = rng.uniform(-1, 1, size=3)
    a = rng.normal() + 1j * rng.normal()
    return sample(grid, lambda X, Y, Z: a * np.exp(-((X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2) / width**2)
                  * np.exp(1j * 0.3 * X))


class TestGrid:
    @pytest.mark.parametrize("n", [4, 12, 100])
    def test_rejects_bad_n(self, n):
        with pytest.raises(ValueError):
            Grid3(n, 4.0)

    def test_spacing(self):
        g = Grid3(32, 3.7)
        assert g.dx * g.n == pytest.approx(2 * 3.7, rel=0, abs=1e-15)

    def test_wavenumber_layout(self):
        g = Grid3(16, 2.0)
        m = np.fft.fftfreq(16, d=1.0 / 16)
        assert np.allclose(g.wavenumbers, math.pi * m / 2.0)
        assert g.wavenumbers.min() == pytest.approx(-math.pi * 8 / 2.0)

    def test_round_trip(self):
        g = Grid3(64, 8.0)
        ws = workspace_for(g)
        u = _random_field(g, 3).values
        back = ws.inverse(ws.forward(u))
        assert np.abs(back - u).max() / np.abs(u).max() < 1e-12


class TestSample:
    def test_zero(self):
        g = Grid3(8, 1.0)
        assert l2_norm_sq(sample(g, lambda X, Y, Z: 0 * X)) == 0.0

    def test_constant(self):
        g = Grid3(16, 1.5)
        u = sample(g, lambda X, Y, Z: np.ones_like(X + Y + Z))
        assert l2_norm_sq(u) == pytest.approx(27.0, rel=1e-14)

    def test_gaussian_integral(self):
        # the documented example grid; dx = 0.5 aliases at the 3e-8 level
        g = Grid3(64, 16.0)
        u = sample(g, lambda X, Y, Z: np.exp(-(X**2 + Y**2 + Z**2)))
        assert abs(l2_norm_sq(u) - (math.pi / 2) ** 1.5) < 1e-10

    def test_gaussian_integral_resolved(self):
        g = Grid3(128, 16.0)
        u = sample(g, lambda X, Y, Z: np.exp(-(X**2 + Y**2 + Z**2)))
        assert abs(l2_norm_sq(u) - (math.pi / 2) ** 1.5) < 1e-10

    @pytest.mark.filterwarnings("ignore:divide by zero:RuntimeWarning")
    def test_nonfinite_names_node(self):
        g = Grid3(8, 1.0)
        with pytest.raises(ValueError, match="node"):
            sample(g, lambda X, Y, Z: 1.0 / (X**2 + Y**2 + Z**2))

    def test_layout_x_fastest(self):
        g = Grid3(8, 1.0)
        u = sample(g, lambda X, Y, Z: X + 10 * Y + 100 * Z + 0j)
        flat = u.flat()
        a = g.axis
        assert flat[1] == pytest.approx(a[1] + 10 * a[0] + 100 * a[0])
        assert flat[8] == pytest.approx(a[0] + 10 * a[1] + 100 * a[0])


class TestNorms:
    def test_box_volume(self):
        g = Grid3(8, 1.0)
        one = sample(g, lambda X, Y, Z: np.ones_like(X + Y + Z))
        assert l2_norm_sq(one) == pytest.approx(8.0)
        assert l2_norm_sq(Field.zeros(g)) == 0.0

    def test_inner_is_l2(self):
        u = _random_field(Grid3(32, 6.0), 1)
        assert inner(u, u).real == pytest.approx(l2_norm_sq(u), rel=1e-14)
        assert abs(inner(u, u).imag) < 1e-14 * l2_norm_sq(u)

    def test_conjugate_symmetry(self):
        g = Grid3(32, 6.0)
        u, v = _random_field(g, 1), _random_field(g, 2)
        assert abs(inner(u, v) - np.conj(inner(v, u))) < 1e-14

    def test_grid_mismatch(self):
        with pytest.raises(GridMismatchError):
            inner(Field.zeros(Grid3(8, 1.0)), Field.zeros(Grid3(8, 2.0)))

    def test_parseval(self):
        g = Grid3(64, 8.0)
        u = _random_field(g, 4)
        ws = workspace_for(g)
        spec = ws.spectral_sum(ws.forward(u.values))
        assert spec == pytest.approx(l2_norm_sq(u), rel=1e-10)

    def test_soliton_against_radial_quadrature(self, q256, consts):
        q = q256
        assert abs(l2_norm_sq(q) / consts.l2_sq - 1) < 1e-8
        assert abs(l4_norm_4(q) / consts.l4_4 - 1) < 1e-8
        assert abs(h1_seminorm_sq(q) / consts.h1_sq - 1) < 1e-8

    def test_orthogonal_to_derivative(self, profile):
        g = Grid3(64, 12.0)
        q = soliton(g, profile, 0.0, (0.5, -0.25, 1.0), tail_tol=1e-5)
        for d in gradient(q):
            assert abs(inner(q, d)) < 1e-10


class TestDerivatives:
    def test_gradient_of_constant(self):
        g = Grid3(16, 2.0)
        c = sample(g, lambda X, Y, Z: np.full(np.broadcast(X, Y, Z).shape, 2.0 + 1j))
        for d in gradient(c):
            assert np.abs(d.values).max() < 1e-13

    def test_plane_wave_eigenfunction(self):
        g = Grid3(32, 3.0)
        k = np.array([3, -5, 7]) * math.pi / 3.0
        u = sample(g, lambda X, Y, Z: np.exp(1j * (k[0] * X + k[1] * Y + k[2] * Z)))
        lap = laplacian(u)
        err = np.abs(lap.values + (k @ k) * u.values).max() / ((k @ k) * np.abs(u.values).max())
        assert err < 1e-12

    def test_laplacian_is_div_grad(self):
        g = Grid3(64, 8.0)
        u = _random_field(g, 5)
        ws = workspace_for(g)
        div = sum(ws.gradient_arrays(gj.values)[j] for j, gj in enumerate(gradient(u, ws)))
        lap = laplacian(u, ws).values
        assert np.abs(div - lap).max() < 1e-10 * np.abs(lap).max()

    def test_linearity(self):
        g = Grid3(32, 6.0)
        u, v = _random_field(g, 6), _random_field(g, 7)
        lhs = laplacian(u * 2.0 + v).values
        rhs = 2.0 * laplacian(u).values + laplacian(v).values
        assert np.abs(lhs - rhs).max() < 1e-12 * np.abs(rhs).max()

    def test_h1_equals_gradient_l2(self):
        u = _random_field(Grid3(64, 8.0), 8)
        gsum = sum(l2_norm_sq(d) for d in gradient(u))
        assert h1_seminorm_sq(u) == pytest.approx(gsum, rel=1e-10)


class TestSnapshot:
    def test_round_trip(self, tmp_path):
        g = Grid3(8, 2.0)
        u = _random_field(g, 9)
        p = tmp_path / "u.snap"
        write_snapshot(p, u, 0.25, "demo")
        v, t, label = read_snapshot(p)
        assert (t, label) == (0.25, "demo")
        assert v.grid == g
        assert np.array_equal(v.values, u.values)

    def test_header_and_layout(self, tmp_path):
        g = Grid3(8, 2.0)
        u = _random_field(g, 10)
        p = tmp_path / "u.snap"
        write_snapshot(p, u, 1.0, "x")
        raw = p.read_bytes()
        head, body = raw.split(b"\n", 1)
        assert b'"n"' in head and b'"L"' in head
        arr = np.frombuffer(body, dtype="<f8")
        assert arr.size == 2 * g.size
        assert arr[0] == u.flat()[0].real and arr[1] == u.flat()[0].imag
        assert arr[2] == u.flat()[1].real
