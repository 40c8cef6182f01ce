"""Functionals along trajectories: mass, energy, delta, virial pair, centre.

The truncated virial weight is w_R(x) = R^2 phi(|x|/R) with phi(s) = s^2 for
s <= 1 and phi = 4 for large s. On the transition we take phi(s) = p(s^2) with

    p'(t) = 1 - S((t - 1) / 6),  1 <= t <= 7,

where S is the degree-17 smoothstep (its first eight derivatives vanish at
both ends). Then p(7) = 4, phi' >= 0, phi'' <= 2, and phi is C^9, so
Laplacian^2 w_R is C^5 and nodal quadrature of the virial integrands keeps
high order even when the transition shell cuts through the soliton core.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import beta, betainc

from .fields import (
    Field,
    Grid3,
    SpectralWorkspace,
    h1_seminorm_sq,
    l2_norm_sq,
    l4_norm_4,
    workspace_for,
)
from .ground_state import GroundStateConstants
from .potentials import Potential, PotentialFields, eval_on_grid

__all__ = [
    "phi",
    "phi_derivatives",
    "VirialWeight",
    "build_weight",
    "mass",
    "energy",
    "delta",
    "P_R",
    "F_R_V",
    "F_inf_0",
    "F_inf_V",
    "repulsive_term",
    "virial_identity_residual",
    "identity_virial_connect",
    "ThresholdNormalizationError",
    "spatial_center",
    "scattering_proxy",
    "ScatteringProxy",
    "DiagnosticsRow",
    "Diagnostics",
    "csv_header",
    "write_csv",
    "r_label",
]

T_END = 7.0  # phi is constant for s >= sqrt(7) < 3
_WIDTH = T_END - 1.0

SMOOTH_ORDER = 8  # S has m = 8 vanishing derivatives at both ends; phi is C^9


class _Smoothstep:
    """S(x) = I_x(m+1, m+1), the regularized incomplete beta function.

    This is the degree 2m+1 smoothstep; the beta form avoids the cancellation
    the power basis suffers at this degree.
    """

    def __init__(self, m: int):
        self.m = m
        self.c = 1.0 / beta(m + 1, m + 1)

    def __call__(self, x):
        return betainc(self.m + 1, self.m + 1, x)

    def integral(self, x):
        # int_0^x S = x S(x) - (1/2) I_x(m+2, m+1)
        return x * self(x) - 0.5 * betainc(self.m + 2, self.m + 1, x)

    def derivs(self, x):
        """First three derivatives of S."""
        m, c = self.m, self.c
        xy = x * (1.0 - x)
        b = xy ** (m - 2)
        u = 1.0 - 2.0 * x
        d1 = c * b * xy * xy
        d2 = c * m * b * xy * u
        d3 = c * m * b * ((m - 1) * u * u - 2.0 * xy)
        return d1, d2, d3


_S = _Smoothstep(SMOOTH_ORDER)


def _p_derivs(t: np.ndarray) -> list[np.ndarray]:
    """p, p', p'', p''', p'''' on 1 <= t <= 7."""
    x = (t - 1.0) / _WIDTH
    p = t - _WIDTH * _S.integral(x)
    d1 = _S(1.0 - x)  # = 1 - S(x), in [0, 1] by construction
    s1, s2, s3 = _S.derivs(x)
    return [p, d1, -s1 / _WIDTH, -s2 / _WIDTH**2, -s3 / _WIDTH**3]


def phi_derivatives(s) -> list[np.ndarray]:
    """phi and its first four derivatives at radii s >= 0."""
    s = np.asarray(s, dtype=float)
    out = [np.zeros_like(s) for _ in range(5)]
    inner = s <= 1.0
    out[0][inner] = s[inner] ** 2
    out[1][inner] = 2 * s[inner]
    out[2][inner] = 2.0
    mid = (s > 1.0) & (s < math.sqrt(T_END))
    sm = s[mid]
    p, p1, p2, p3, p4 = _p_derivs(sm * sm)
    out[0][mid] = p
    out[1][mid] = 2 * sm * p1
    out[2][mid] = 2 * p1 + 4 * sm**2 * p2
    out[3][mid] = 12 * sm * p2 + 8 * sm**3 * p3
    out[4][mid] = 12 * p2 + 48 * sm**2 * p3 + 16 * sm**4 * p4
    outer = s >= math.sqrt(T_END)
    out[0][outer] = 4.0
    return out


def phi(s) -> np.ndarray:
    return phi_derivatives(s)[0]


@dataclass(frozen=True, eq=False)
class VirialWeight:
    """Nodal w_R and its analytic derivatives. R = inf means w = |x|^2."""

    grid: Grid3
    R: float
    w: np.ndarray
    grad: tuple[np.ndarray, np.ndarray, np.ndarray]
    hess: dict  # keys (j, k) with j <= k
    lap: np.ndarray
    bilap: np.ndarray

    def hess_jk(self, j: int, k: int) -> np.ndarray:
        return self.hess[(min(j, k), max(j, k))]


def build_weight(grid: Grid3, R: float) -> VirialWeight:
    if not (R >= 1.0):
        raise ValueError("R must be >= 1 (or inf)")
    X, Y, Z = grid.coords()
    shape = grid.shape
    xs = [np.broadcast_to(c, shape) for c in (X, Y, Z)]
    r2 = X * X + Y * Y + Z * Z
    if math.isinf(R):
        w = np.broadcast_to(r2, shape).copy()
        grad = tuple(2.0 * c for c in xs)
        hess = {(j, k): np.full(shape, 2.0 if j == k else 0.0) for j in range(3) for k in range(j, 3)}
        return VirialWeight(grid, R, w, grad, hess, np.full(shape, 6.0), np.zeros(shape))

    r = np.sqrt(np.broadcast_to(r2, shape))
    s = r / R
    f0, f1, f2, f3, f4 = phi_derivatives(s)
    inner = s <= 1.0
    w = np.where(inner, r2, R * R * f0)  # exactly |x|^2 inside
    w1 = R * f1  # radial derivatives of w
    w2 = f2
    w3 = f3 / R
    w4 = f4 / R**2
    with np.errstate(divide="ignore", invalid="ignore"):
        w1_over_r = np.where(inner, 2.0, w1 / r)
        rad = np.where(inner, 0.0, (w2 - w1_over_r) / (r * r))
        bilap = np.where(inner, 0.0, w4 + 4.0 * w3 / r)
    grad = tuple(w1_over_r * c for c in xs)
    hess = {}
    for j in range(3):
        for k in range(j, 3):
            h = rad * xs[j] * xs[k]
            if j == k:
                h = h + w1_over_r
            hess[(j, k)] = h
    lap = np.where(inner, 6.0, w2 + 2.0 * w1_over_r)
    return VirialWeight(grid, R, w, grad, hess, lap, bilap)


# ---------------------------------------------------------------- functionals

def _pot(p: Potential | PotentialFields | None, grid: Grid3) -> PotentialFields | None:
    if p is None:
        return None
    if isinstance(p, PotentialFields):
        return None if p.potential.is_zero else p
    if p.is_zero:
        return None
    return eval_on_grid(p, grid)


def mass(u: Field) -> float:
    return 0.5 * l2_norm_sq(u)


def potential_energy(u: Field, p) -> float:
    """Integral of V |u|^2."""
    pf = _pot(p, u.grid)
    if pf is None:
        return 0.0
    return float((pf.v_real * u.abs2()).sum()) * u.grid.dv


def energy(u: Field, p=None, ws: SpectralWorkspace | None = None) -> float:
    return 0.5 * h1_seminorm_sq(u, ws) + 0.5 * potential_energy(u, p) - 0.25 * l4_norm_4(u)


def delta(u: Field, p, q_h1_sq: float | GroundStateConstants, ws: SpectralWorkspace | None = None) -> float:
    """||grad Q||^2 - (||grad u||^2 + int V |u|^2)."""
    h1q = q_h1_sq.h1_sq if isinstance(q_h1_sq, GroundStateConstants) else float(q_h1_sq)
    return h1q - h1_seminorm_sq(u, ws) - potential_energy(u, p)


def _grad(u: Field, ws, grads):
    if grads is not None:
        return grads
    ws = ws or workspace_for(u.grid)
    return ws.gradient_arrays(u.values)


def P_R(u: Field, w: VirialWeight, ws: SpectralWorkspace | None = None, grads=None) -> float:
    """2 Im int conj(u) grad u . grad w."""
    g = _grad(u, ws, grads)
    s = g[0] * w.grad[0] + g[1] * w.grad[1] + g[2] * w.grad[2]
    return 2.0 * float(np.vdot(u.values, s).imag) * u.grid.dv


def repulsive_term(u: Field, w: VirialWeight, p) -> float:
    """-2 int |u|^2 grad V . grad w (nonnegative for repulsive radial V)."""
    pf = _pot(p, u.grid)
    if pf is None:
        return 0.0
    gv = sum(pf.grad[j].values.real * w.grad[j] for j in range(3))
    return -2.0 * float((u.abs2() * gv).sum()) * u.grid.dv


def F_R_V(u: Field, w: VirialWeight, p=None, ws: SpectralWorkspace | None = None, grads=None) -> float:
    """int (-bilap w)|u|^2 + 4 Re conj(u_j) u_k w_jk - 2|u|^2 grad V.grad w - |u|^4 lap w."""
    g = _grad(u, ws, grads)
    a2 = u.abs2()
    total = -float((w.bilap * a2).sum()) - float((w.lap * a2 * a2).sum())
    quad = 0.0
    for j in range(3):
        gj = g[j]
        quad += float((w.hess_jk(j, j) * (gj.real * gj.real + gj.imag * gj.imag)).sum())
        for k in range(j + 1, 3):
            gk = g[k]
            cross = gj.real * gk.real + gj.imag * gk.imag
            quad += 2.0 * float((w.hess_jk(j, k) * cross).sum())
    total += 4.0 * quad
    return total * u.grid.dv + repulsive_term(u, w, p)


def F_inf_0(u: Field, ws: SpectralWorkspace | None = None) -> float:
    """8 int |grad u|^2 - 6 int |u|^4."""
    return 8.0 * h1_seminorm_sq(u, ws) - 6.0 * l4_norm_4(u)


def F_inf_V(u: Field, p=None, ws: SpectralWorkspace | None = None) -> float:
    """8 int |grad u|^2 - 6 int |u|^4 - 4 int x.grad V |u|^2."""
    pf = _pot(p, u.grid)
    extra = 0.0
    if pf is not None:
        extra = -4.0 * float((pf.radial_virial.values.real * u.abs2()).sum()) * u.grid.dv
    return F_inf_0(u, ws) + extra


class ThresholdNormalizationError(ValueError):
    """The data are not normalized to the ground-state mass and energy."""


def identity_virial_connect(u: Field, p, consts: GroundStateConstants, tol: float = 1e-6,
                            ws: SpectralWorkspace | None = None) -> float:
    """Residual of ||grad u||^2 - (3/4)||u||_4^4 = delta/2 - int V|u|^2.

    Only valid when M(u) = M(Q) and E_V(u) = E_0(Q); checked to ``tol``.
    """
    m = mass(u)
    e = energy(u, p, ws)
    if abs(m / consts.mass - 1.0) > tol or abs(e / consts.energy - 1.0) > tol:
        raise ThresholdNormalizationError(
            f"M(u)/M(Q) - 1 = {m / consts.mass - 1:.2e}, E(u)/E(Q) - 1 = {e / consts.energy - 1:.2e}"
        )
    h1 = h1_seminorm_sq(u, ws)
    pv = potential_energy(u, p)
    lhs = h1 - 0.75 * l4_norm_4(u)
    rhs = 0.5 * (consts.h1_sq - h1 - pv) - pv
    return lhs - rhs


# ------------------------------------------------------------ spatial centre

_BALL_CACHE: dict = {}


def _ball_hat(grid: Grid3, ws: SpectralWorkspace, radius: float = 1.0) -> np.ndarray:
    key = (grid, radius)
    if key not in _BALL_CACHE:
        # indicator of the unit ball about node 0 (periodic distances)
        idx = np.arange(grid.n)
        d = np.minimum(idx, grid.n - idx) * grid.dx
        r2 = d[:, None, None] ** 2 + d[None, :, None] ** 2 + d[None, None, :] ** 2
        ball = (r2 <= radius * radius).astype(float)
        _BALL_CACHE.clear()
        _BALL_CACHE[key] = ws.forward(ball)
    return _BALL_CACHE[key]


def local_mass(u: Field, ws: SpectralWorkspace | None = None, radius: float = 1.0) -> np.ndarray:
    """int over B_radius(x_i) of |u|^2 at every node (nodal quadrature)."""
    ws = ws or workspace_for(u.grid)
    conv = ws.inverse(ws.forward(u.abs2()) * _ball_hat(u.grid, ws, radius), overwrite=True).real
    return conv * u.grid.dv


def spatial_center(u: Field, ws: SpectralWorkspace | None = None) -> tuple[float, float, float]:
    """Node maximizing the unit-ball mass; ties go to smallest |x|, then lexicographic."""
    lm = local_mass(u, ws)
    top = float(lm.max())
    if top <= 0.0:
        raise ValueError("spatial_center of a zero field")
    cand = np.argwhere(lm >= top * (1.0 - 1e-12))
    a = u.grid.axis
    pos = a[cand]
    r2 = (pos**2).sum(axis=1)
    order = np.lexsort((pos[:, 2], pos[:, 1], pos[:, 0], np.round(r2, 12)))
    best = pos[order[0]]
    return (float(best[0]), float(best[1]), float(best[2]))


# ----------------------------------------------------------- diagnostics rows

def r_label(R: float) -> str:
    if math.isinf(R):
        return "inf"
    return str(int(R)) if float(R).is_integer() else repr(float(R))


@dataclass
class DiagnosticsRow:
    t: float
    M: float
    E_V: float
    H1V: float  # ||grad u||^2 + int V|u|^2
    potV: float
    L4: float
    delta: float
    P: dict
    F: dict
    F_inf_0: float
    center: tuple[float, float, float]
    l5: float
    repulsive: dict = field(default_factory=dict)
    h1: float = 0.0
    l2: float = 0.0

    def csv_values(self, Rs: Sequence[float]) -> list[float]:
        vals = [self.t, self.M, self.E_V, self.H1V, self.potV, self.L4, self.delta]
        for R in Rs:
            vals += [self.P[R], self.F[R]]
        vals += [self.F_inf_0, *self.center, self.l5]
        return vals


def csv_header(Rs: Sequence[float]) -> list[str]:
    cols = ["t", "M", "E_V", "H1V", "potV", "L4", "delta"]
    for R in Rs:
        lab = r_label(R)
        cols += [f"P_R{lab}", f"F_R{lab}_V"]
    return cols + ["F_inf_0", "xc_x", "xc_y", "xc_z", "l5_increment"]


def _fmt(x: float) -> str:
    return repr(float(x))


def write_csv(path_or_buf, header: Sequence[str], rows: Iterable[Sequence[float]]) -> None:
    own = not hasattr(path_or_buf, "write")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([_fmt(v) for v in r])
    finally:
        if own:
            fh.close()


class Diagnostics:
    """Row producer for ``evolve``: precomputes weights and potential fields."""

    def __init__(self, grid: Grid3, potential: Potential, consts: GroundStateConstants,
                 Rs: Sequence[float] = (2.0, 5.0, math.inf)):
        self.grid = grid
        self.ws = workspace_for(grid)
        self.potential = potential
        self.pf = _pot(potential, grid)
        self.consts = consts
        self.Rs = list(Rs)
        self.weights = {R: build_weight(grid, R) for R in self.Rs}

    def header(self) -> list[str]:
        return csv_header(self.Rs)

    def __call__(self, t: float, u: Field) -> DiagnosticsRow:
        ws = self.ws
        uh = ws.forward(u.values)
        h1 = ws.spectral_sum(uh, ws.k2)
        grads = [ws.inverse(1j * kj * uh) for kj in ws.k]
        a2 = u.abs2()
        dv = self.grid.dv
        l2 = float(a2.sum()) * dv
        l4 = float((a2 * a2).sum()) * dv
        pv = 0.0 if self.pf is None else float((self.pf.v_real * a2).sum()) * dv
        P, F, rep = {}, {}, {}
        for R, w in self.weights.items():
            P[R] = P_R(u, w, ws, grads)
            F[R] = F_R_V(u, w, self.pf, ws, grads)
            rep[R] = repulsive_term(u, w, self.pf)
        return DiagnosticsRow(
            t=t,
            M=0.5 * l2,
            E_V=0.5 * h1 + 0.5 * pv - 0.25 * l4,
            H1V=h1 + pv,
            potV=pv,
            L4=l4,
            delta=self.consts.h1_sq - h1 - pv,
            P=P,
            F=F,
            F_inf_0=8.0 * h1 - 6.0 * l4,
            center=spatial_center(u, ws),
            l5=float((a2 ** 2.5).sum()) * dv,
            repulsive=rep,
            h1=h1,
            l2=l2,
        )


def virial_identity_residual(times: Sequence[float], rows: Sequence[DiagnosticsRow], Rs: Sequence[float],
                             dt: float, h1_unit: float) -> dict:
    """Centred-difference dP_R/dt minus F_R^V at interior samples, in units of h1_unit.

    Requires a uniform sample spacing of at most 10 dt.
    """
    t = np.asarray(times, dtype=float)
    if t.size < 3:
        raise ValueError("need at least three samples")
    h = np.diff(t)
    if not np.allclose(h, h[0], rtol=1e-9, atol=0):
        raise ValueError("samples are not uniformly spaced")
    if h[0] > 10.0 * dt * (1 + 1e-12):
        raise ValueError(f"sample spacing {h[0]:.3g} exceeds 10*dt = {10 * dt:.3g}")
    out = {}
    for R in Rs:
        P = np.array([r.P[R] for r in rows])
        F = np.array([r.F[R] for r in rows])
        dP = (P[2:] - P[:-2]) / (2 * h[0])
        out[R] = (dP - F[1:-1]) / h1_unit
    return out


@dataclass
class ScatteringProxy:
    times: np.ndarray
    cumulative: np.ndarray
    last_quarter_fraction: float
    l4_decay_exponent: float
    verdict: str


def scattering_proxy(times: Sequence[float], l5: Sequence[float], l4: Sequence[float] | None = None,
                     saturation: float = 0.01) -> ScatteringProxy:
    """Cumulative int int |u|^5 (trapezoid in t) and the fitted decay of ||u||_4.

    Verdict "saturating" if the last quarter of the window adds less than
    ``saturation`` of the total, else "growing".
    """
    t = np.asarray(times, dtype=float)
    f = np.asarray(l5, dtype=float)
    if t.size == 0:
        return ScatteringProxy(t, f, 0.0, 0.0, "saturating")
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(t))])
    total = float(cum[-1])
    t_q = t[0] + 0.75 * (t[-1] - t[0])
    cq = float(np.interp(t_q, t, cum))
    frac = 0.0 if total == 0.0 else (total - cq) / total
    expo = 0.0
    if l4 is not None and t.size > 4:
        l4n = np.asarray(l4, dtype=float) ** 0.25
        sel = (t >= t[0] + 0.5 * (t[-1] - t[0])) & (t > 0) & (l4n > 0)
        if sel.sum() >= 2:
            expo = float(np.polyfit(np.log(t[sel]), np.log(l4n[sel]), 1)[0])
    verdict = "saturating" if frac < saturation else "growing"
    return ScatteringProxy(t, cum, frac, expo, verdict)
