import math

import numpy as np
import pytest

from nlslab.diagnostics import (
    F_R_V,
    F_inf_0,
    F_inf_V,
    P_R,
    Diagnostics,
    ThresholdNormalizationError,
    build_weight,
    csv_header,
    delta,
    energy,
    identity_virial_connect,
    mass,
    phi_derivatives,
    repulsive_term,
    scattering_proxy,
    spatial_center,
    virial_identity_residual,
)
from nlslab.evolution import PropagatorConfig, evolve
from nlslab.experiments import tune_to_threshold
from nlslab.fields import Field, Grid3, l2_norm_sq, sample, workspace_for
from nlslab.potentials import Potential

BUMP = Potential.gaussian_bump(1.0, 1.0)


def _smooth(grid, seed, amp=1.0):
    rng = np.random.default_rng(seed)
    c = rng.uniform(-1.5, 1.5, 3)
    kv = rng.normal(size=3)
    w = rng.uniform(0.8, 1.3)
    a = amp * (rng.normal() + 1j * rng.normal())
    return sample(grid, lambda X, Y, Z: a * np.exp(-((X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2) / (2 * w * w)
                                                   + 1j * (kv[0] * X + kv[1] * Y + kv[2] * Z)))


class TestEnergyMassDelta:
    def test_energy_of_q(self, q256, consts):
        assert abs(energy(q256) / (consts.h1_sq / 6) - 1) < 1e-6

    def test_potential_raises_energy(self, grid64):
        for s in range(20):
            u = _smooth(grid64, s)
            assert energy(u, BUMP) >= energy(u)

    def test_soliton_mass(self, grid256, profile, consts):
        from nlslab.ground_state import soliton

        u = soliton(grid256, profile, 0.4, (0.5, 0.0, -1.0), tail_tol=1e-6)
        assert mass(u) == pytest.approx(0.5 * consts.l2_sq, rel=1e-8)

    def test_delta_of_soliton(self, q256, consts):
        assert abs(delta(q256, Potential.zero(), consts)) < 1e-8 * consts.h1_sq

    def test_delta_of_zero(self, grid64, consts):
        assert delta(Field.zeros(grid64), BUMP, consts) == consts.h1_sq


class TestWeight:
    def test_phi_monotone_and_symbols(self):
        s = np.linspace(0.0, 4.0, 40001)
        f = phi_derivatives(s)
        assert f[1].min() >= 0.0
        assert f[2].max() <= 2.0 + 1e-12
        pos = s > 0
        for k in range(5):
            # |phi^(k)(s)| <= C s^(2-k); the steep C^9 transition puts C near 1.2e3 at k = 4
            assert (np.abs(f[k][pos]) * s[pos] ** (k - 2.0)).max() < 2e3

    def test_phi_endpoints(self):
        f = phi_derivatives(np.array([0.5, 1.0, 3.0, 5.0]))
        assert f[0][:2] == pytest.approx([0.25, 1.0])
        assert f[0][2:] == pytest.approx([4.0, 4.0])
        assert np.all(f[1][2:] == 0)

    def test_infinite_weight(self, grid64):
        w = build_weight(grid64, math.inf)
        assert np.all(w.lap == 6.0) and np.all(w.bilap == 0.0)
        assert np.all(w.hess_jk(0, 0) == 2.0) and np.all(w.hess_jk(0, 1) == 0.0)

    @pytest.mark.parametrize("R", [1.0, 2.0, 3.5])
    def test_inner_and_outer_regions(self, grid64, R):
        w = build_weight(grid64, R)
        X, Y, Z = grid64.coords()
        r2 = np.broadcast_to(X * X + Y * Y + Z * Z, grid64.shape)
        r = np.sqrt(r2)
        inside = r <= R
        assert np.array_equal(w.w[inside], r2[inside])
        outside = r > 3 * R
        for gj in w.grad:
            assert np.all(gj[outside] == 0.0)
        assert np.all(w.bilap[outside] == 0.0)

    def test_analytic_matches_spectral(self, grid128):
        # w_2 is constant beyond sqrt(7)*2 < 8, hence smooth and periodic on the box
        w = build_weight(grid128, 2.0)
        ws = workspace_for(grid128)
        lap = ws.laplacian_array(w.w).real
        bilap = ws.laplacian_array(lap).real
        assert np.abs(lap - w.lap).max() < 1e-6 * np.abs(w.lap).max()
        assert np.abs(bilap - w.bilap).max() < 1e-4 * np.abs(w.bilap).max()
        gx = ws.gradient_arrays(w.w)[0].real
        assert np.abs(gx - w.grad[0]).max() < 1e-6 * np.abs(w.grad[0]).max()
        hxy = ws.gradient_arrays(ws.gradient_arrays(w.w)[1])[0].real
        assert np.abs(hxy - w.hess_jk(0, 1)).max() < 1e-5 * np.abs(w.hess_jk(0, 0)).max()

    def test_rejects_small_r(self, grid64):
        with pytest.raises(ValueError):
            build_weight(grid64, 0.5)


class TestVirial:
    def test_p_of_real_field(self, ref64):
        for R in (2.0, 5.0, math.inf):
            assert abs(P_R(ref64.q, build_weight(ref64.grid, R))) < 1e-12

    def test_p_conjugation(self, grid64):
        u = _smooth(grid64, 3)
        w = build_weight(grid64, 2.0)
        assert P_R(u.conj(), w) == pytest.approx(-P_R(u, w), rel=1e-12)

    def test_galilean_boost(self, grid128, ref64, profile):
        from nlslab.ground_state import soliton

        y = (1.0, 0.5, 0.0)
        q = soliton(grid128, profile, 0.0, y, tail_tol=1e-3)
        v = np.array([2.0, -1.0, 0.0]) * math.pi / grid128.L  # lattice wavenumbers keep u periodic
        u = Field(grid128, q.values * sample(grid128, lambda X, Y, Z: np.exp(1j * (v[0] * X + v[1] * Y))).values)
        p = P_R(u, build_weight(grid128, math.inf))
        # 2 Im int conj(u) grad u . 2x = 4 v . int x |Q(x - y)|^2
        X, Y, Z = grid128.coords()
        direct = 4 * float(((v[0] * X + v[1] * Y + v[2] * Z) * q.abs2()).sum()) * grid128.dv
        # modes within |v| of Nyquist wrap under the boost, a ~1e-9 effect at dx = 0.125
        assert p == pytest.approx(direct, rel=1e-7)
        # centroid of the box-truncated soliton is y up to its tail (1e-3 of the peak at the faces)
        assert p == pytest.approx(4 * float(v @ np.array(y)) * l2_norm_sq(q), rel=1e-5)

    def test_f_inf_of_soliton(self, q256, consts):
        assert abs(F_inf_0(q256)) < 1e-5 * consts.h1_sq

    def test_weight_inf_matches_closed_form(self, grid64):
        u = _smooth(grid64, 4)
        w = build_weight(grid64, math.inf)
        assert F_R_V(u, w) == pytest.approx(F_inf_0(u), rel=1e-11)
        assert F_R_V(u, w, BUMP) == pytest.approx(F_inf_V(u, BUMP), rel=1e-11)

    def test_compact_data_sees_no_truncation(self, grid64):
        u = sample(grid64, lambda X, Y, Z: np.exp(-(X * X + Y * Y + Z * Z) / 0.5) * np.exp(0.7j * X))
        w5 = build_weight(grid64, 5.0)
        assert F_R_V(u, w5, BUMP) == pytest.approx(F_inf_V(u, BUMP), rel=1e-10)

    def test_repulsive_term_nonnegative(self, grid64):
        for p in (BUMP, Potential.inverse_square(1.0, 0.5)):
            for R in (1.0, 2.0, 5.0, math.inf):
                w = build_weight(grid64, R)
                for s in range(5):
                    assert repulsive_term(_smooth(grid64, s), w, p) >= 0.0


class TestVirialIdentity:
    def test_gaussian_free(self, consts):
        g = Grid3(64, 16.0)
        u0 = sample(g, lambda X, Y, Z: np.exp(-(X * X + Y * Y + Z * Z) / 2) + 0j)
        Rs = [5.0]
        diag = Diagnostics(g, Potential.zero(), consts, Rs)
        cfg = PropagatorConfig(dt=5e-4, t_end=1.0, stride=10)
        tr = evolve(u0, cfg, diag=diag)
        res = virial_identity_residual(tr.times, tr.rows, Rs, cfg.dt, consts.h1_sq)
        assert np.abs(res[5.0]).max() < 1e-3

    def test_coarse_stride_rejected(self, consts):
        rows = [None] * 5
        with pytest.raises(ValueError, match="exceeds"):
            virial_identity_residual([0, 0.1, 0.2, 0.3, 0.4], rows, [5.0], 1e-3, consts.h1_sq)

    def test_soliton_both_sides_vanish(self, ref64):
        diag = Diagnostics(ref64.grid, Potential.zero(), ref64.constants, [5.0])
        tr = evolve(ref64.soliton(), PropagatorConfig(dt=5e-4, t_end=0.02, stride=10), diag=diag)
        h1 = ref64.constants.h1_sq
        for row in tr.rows:
            # splitting error gives the evolved soliton a small radial phase
            assert abs(row.P[5.0]) < 1e-3 * h1
            # F_R vanishes up to the grid ground state's Pohozaev defect at dx = 0.25
            assert abs(row.F[5.0]) < 5e-2 * h1
        res = virial_identity_residual(tr.times, tr.rows, [5.0], 5e-4, h1)
        assert np.abs(res[5.0]).max() < 5e-2


class TestVirialConnect:
    def test_threshold_tuned(self, ref64, consts):
        u = ref64.soliton(0.3, (3.0, 0.0, 0.0))
        tuned = tune_to_threshold(u, BUMP, consts, "exact").field
        assert abs(identity_virial_connect(tuned, BUMP, consts)) < 1e-6

    def test_soliton_free(self, q256, consts):
        assert abs(identity_virial_connect(q256, Potential.zero(), consts)) < 1e-6

    def test_refuses_unnormalized(self, ref64, consts):
        with pytest.raises(ThresholdNormalizationError):
            identity_virial_connect(ref64.q * 1.01, Potential.zero(), consts)


class TestCenter:
    def test_soliton(self, ref64):
        y = (2.0, -1.5, 0.75)
        c = spatial_center(ref64.soliton(0.9, y))
        assert np.linalg.norm(np.subtract(c, y)) <= ref64.grid.dx

    def test_translation_equivariance(self, grid64):
        u = _smooth(grid64, 8)
        shift = (4, -3, 2)
        moved = Field(grid64, np.roll(u.values, shift, axis=(0, 1, 2)))
        c0, c1 = np.array(spatial_center(u)), np.array(spatial_center(moved))
        assert np.allclose(c1 - c0, np.array(shift) * grid64.dx)

    def test_heavier_soliton_wins(self, ref64):
        a = ref64.soliton(0.0, (-3.0, 0.0, 0.0))
        b = ref64.soliton(0.0, (3.0, 0.0, 0.0))
        c = spatial_center(Field(ref64.grid, a.values + 0.8 * b.values))
        assert c == pytest.approx((-3.0, 0.0, 0.0))

    def test_zero_field(self, grid64):
        with pytest.raises(ValueError):
            spatial_center(Field.zeros(grid64))


class TestScatteringProxy:
    def test_zero(self):
        sp = scattering_proxy(np.linspace(0, 1, 11), np.zeros(11))
        assert sp.cumulative[-1] == 0.0 and sp.verdict == "saturating"

    def test_constant_increment_grows(self):
        t = np.linspace(0, 2, 101)
        sp = scattering_proxy(t, np.full(101, 3.0))
        assert np.allclose(np.diff(sp.cumulative), 3.0 * 0.02)
        assert sp.last_quarter_fraction == pytest.approx(0.25)
        assert sp.verdict == "growing"

    def test_decaying_saturates(self):
        t = np.linspace(0, 10, 1001)
        sp = scattering_proxy(t, (1 + t) ** -6.0, l4=(1 + t) ** -3.0)
        assert sp.verdict == "saturating"
        assert np.all(np.diff(sp.cumulative) >= 0)
        assert sp.l4_decay_exponent < 0


def test_csv_header_order():
    assert csv_header([2.0, math.inf]) == [
        "t", "M", "E_V", "H1V", "potV", "L4", "delta", "P_R2", "F_R2_V", "P_Rinf", "F_Rinf_V",
        "F_inf_0", "xc_x", "xc_y", "xc_z", "l5_increment",
    ]
