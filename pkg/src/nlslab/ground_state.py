"""Ground state Q of -Q + Laplacian Q + Q^3 = 0 in three dimensions.

Two independent routes: radial shooting (RK4 + bisection on Q(0)) and a
Petviashvili iteration on a periodic grid. ``GridGroundState`` wraps a
grid-consistent Q together with constants computed by the same nodal
functionals used everywhere else, so that delta and the threshold are exact
on the grid (delta(Q) = 0 to roundoff).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.fft as sfft
from scipy.integrate import simpson
from scipy.interpolate import CubicSpline

from .fields import Field, Grid3, h1_seminorm_sq, l2_norm_sq, l4_norm_4, workspace_for

__all__ = [
    "GroundStateProfile",
    "GroundStateConstants",
    "GridGroundState",
    "ShootingError",
    "ConvergenceError",
    "SupportError",
    "solve_shooting",
    "solve_petviashvili",
    "soliton",
    "constants",
    "write_profile",
    "read_profile",
    "default_profile",
]

log = logging.getLogger(__name__)


class ShootingError(RuntimeError):
    pass


class ConvergenceError(RuntimeError):
    pass


class SupportError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GroundStateProfile:
    """Radial samples of Q on r_i = i*h, with a matched exponential tail.

    For r >= r_splice the samples are the tail A exp(-mu r)/r, matched in value
    and slope to the ODE solution at r_splice.
    """

    r: np.ndarray
    q: np.ndarray
    tail_A: float
    tail_mu: float
    r_splice: float
    dq: np.ndarray | None = None

    @property
    def q0(self) -> float:
        return float(self.q[0])

    @property
    def r_max(self) -> float:
        return float(self.r[-1])

    @property
    def h(self) -> float:
        return float(self.r[1] - self.r[0])

    @cached_property
    def spline(self) -> CubicSpline:
        return CubicSpline(self.r, self.q, bc_type=((1, 0.0), "not-a-knot"))

    def tail(self, r):
        r = np.asarray(r, dtype=float)
        return self.tail_A * np.exp(-self.tail_mu * r) / r

    def value(self, r):
        r = np.asarray(r, dtype=float)
        inside = r <= self.r_max
        out = np.empty_like(r)
        out[inside] = self.spline(r[inside])
        if (~inside).any():
            out[~inside] = self.tail(r[~inside])
        return out

    def derivative(self, r):
        r = np.asarray(r, dtype=float)
        inside = r <= self.r_max
        out = np.empty_like(r)
        out[inside] = self.spline(r[inside], 1)
        ro = r[~inside]
        if ro.size:
            out[~inside] = -self.tail(ro) * (self.tail_mu + 1.0 / ro)
        return out

    def node_derivative(self) -> np.ndarray:
        """Q'(r_i): the integrator's values when known, else 4th-order differences."""
        if self.dq is not None:
            return self.dq
        q, h = self.q, self.h
        d = np.empty_like(q)
        d[2:-2] = (q[:-4] - 8 * q[1:-3] + 8 * q[3:-1] - q[4:]) / (12 * h)
        d[0] = 0.0
        d[1] = (q[1] - 8 * q[0] + 8 * q[2] - q[3]) / (12 * h)  # Q is even
        d[-2:] = -self.tail(self.r[-2:]) * (self.tail_mu + 1.0 / self.r[-2:])
        return d

    def residual(self) -> np.ndarray:
        """Q'' + (2/r) Q' - Q + Q^3 at interior nodes r_2 .. r_{N-3}.

        Q'' is a fourth-order difference of Q', which keeps the roundoff floor
        well below that of a second difference of Q.
        """
        p, h, r, q = self.node_derivative(), self.h, self.r, self.q
        d2 = (p[:-4] - 8 * p[1:-3] + 8 * p[3:-1] - p[4:]) / (12 * h)
        qi = q[2:-2]
        return d2 + 2.0 * p[2:-2] / r[2:-2] - qi + qi**3


def _series_coefficients(q0: float, order: int = 12) -> np.ndarray:
    """Even Taylor coefficients a_0, a_2, ... of Q about r = 0."""
    m = order // 2 + 1
    a = np.zeros(m)
    a[0] = q0
    for j in range(m - 1):
        # coefficient of r^{2j} in Q - Q^3, using a[0..j]
        c = np.zeros(j + 1)
        c[: j + 1] = a[: j + 1]
        sq = np.convolve(c, c)[: j + 1]
        cube = np.convolve(sq, c)[: j + 1]
        rhs = a[j] - cube[j]
        a[j + 1] = rhs / ((2 * j + 2) * (2 * j + 3))
    return a


_SERIES_NODES = 50


def _rk4_shoot(q0: float, h: float, n_steps: int, record: bool):
    """Integrate Q'' = -2Q'/r + Q - Q^3 outward from a Taylor start.

    The first nodes (r <= 50 h) come from the even power series, which avoids
    the 1/r singularity. Returns (+1, r) on a sign crossing (q0 too large),
    (-1, r) when Q turns upward while positive (q0 too small), or (0, r) if
    neither happened. With ``record`` returns the node arrays instead.
    """
    a = _series_coefficients(q0)
    i0 = min(_SERIES_NODES, n_steps)
    rs = h * np.arange(i0 + 1)
    t = rs * rs
    qser = np.polynomial.polynomial.polyval(t, a)
    pser = rs * np.polynomial.polynomial.polyval(t, a[1:] * 2 * np.arange(1, a.size))
    r = float(rs[-1])
    q = float(qser[-1])
    p = float(pser[-1])
    if record:
        qs = np.empty(n_steps + 1)
        ps = np.empty(n_steps + 1)
        qs[: i0 + 1] = qser
        ps[: i0 + 1] = pser
    for i in range(i0 + 1, n_steps + 1):
        # substeps where the 2/r term is still stiff
        m = 10 if r < 1.0 else 1
        hs = h / m
        half = 0.5 * hs
        sixth = hs / 6.0
        for _ in range(m):
            k1p = -2.0 * p / r + q - q * q * q
            rm = r + half
            q2 = q + half * p
            p2 = p + half * k1p
            k2p = -2.0 * p2 / rm + q2 - q2 * q2 * q2
            q3 = q + half * p2
            p3 = p + half * k2p
            k3p = -2.0 * p3 / rm + q3 - q3 * q3 * q3
            r1 = r + hs
            q4 = q + hs * p3
            p4 = p + hs * k3p
            k4p = -2.0 * p4 / r1 + q4 - q4 * q4 * q4
            q += sixth * (p + 2 * p2 + 2 * p3 + p4)
            p += sixth * (k1p + 2 * k2p + 2 * k3p + k4p)
            r = r1
        r = i * h
        if record:
            qs[i], ps[i] = q, p
        elif q < 0:
            return 1, r
        elif p > 0:
            return -1, r
    if record:
        return qs, ps
    return 0, r


def solve_shooting(tol: float = 1e-9, r_max: float = 25.0, h: float = 1e-3,
                   bracket: tuple[float, float] = (3.5, 5.0), spread_tol: float = 1e-9) -> GroundStateProfile:
    """Shoot on Q(0) and splice an exponential tail where shooting loses accuracy.

    Bisection runs to machine precision between an initial value whose
    solution crosses zero and one whose solution turns upward. The two bracket
    solutions then agree to ``spread_tol`` (relative) up to some radius; the
    profile is the ODE solution up to there and the matched tail beyond.
    """
    if tol <= 0 or r_max < 20:
        raise ValueError("need tol > 0 and r_max >= 20")
    n_steps = int(round(r_max / h))
    lo, hi = bracket
    s_lo, _ = _rk4_shoot(lo, h, n_steps, False)
    s_hi, _ = _rk4_shoot(hi, h, n_steps, False)
    if not (s_lo < 0 < s_hi):
        raise ShootingError(f"bracket {bracket} does not straddle the ground state ({s_lo}, {s_hi})")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        s, _ = _rk4_shoot(mid, h, n_steps, False)
        if s > 0:
            hi = mid
        elif s < 0:
            lo = mid
        else:
            lo = hi = mid
            break
    q_lo, p_lo = _rk4_shoot(lo, h, n_steps, True)
    q_hi, p_hi = _rk4_shoot(hi, h, n_steps, True)
    # keep the lower bracket exactly so a cached profile can be re-integrated from Q(0)
    q, p = q_lo, p_lo
    r = h * np.arange(n_steps + 1)

    with np.errstate(invalid="ignore", divide="ignore"):
        spread = np.abs(q_lo - q_hi) / np.abs(q)
    good = (spread <= spread_tol) & (q > 0) & (p <= 0)
    bad = np.flatnonzero(~good[1:])
    i_s = int(bad[0]) if bad.size else n_steps
    if r[i_s] < 4.0:
        raise ShootingError(f"shooting solution unreliable beyond r = {r[i_s]:.3f}")
    r_s, q_s, p_s = r[i_s], q[i_s], p[i_s]
    mu = -p_s / q_s - 1.0 / r_s
    A = q_s * r_s * math.exp(mu * r_s)
    q = q.copy()
    p = p.copy()
    q[i_s:] = A * np.exp(-mu * r[i_s:]) / r[i_s:]
    p[i_s:] = -q[i_s:] * (mu + 1.0 / r[i_s:])
    prof = GroundStateProfile(r=r, q=q, tail_A=float(A), tail_mu=float(mu), r_splice=float(r_s), dq=p)
    if not (np.all(np.diff(prof.q) < 0)):
        raise ShootingError("profile is not strictly decreasing")
    if prof.q[-1] >= tol:
        raise ShootingError(f"Q(r_max) = {prof.q[-1]:.3e} is not below tol = {tol:.1e}; increase r_max")
    log.info("shooting: Q(0)=%.15g splice r=%.3f A=%.10g mu=%.10g", prof.q0, r_s, A, mu)
    return prof


@dataclass(frozen=True)
class GroundStateConstants:
    l2_sq: float
    h1_sq: float
    l4_4: float

    @property
    def mass(self) -> float:
        return 0.5 * self.l2_sq

    @property
    def energy(self) -> float:
        return 0.5 * self.h1_sq - 0.25 * self.l4_4

    @property
    def mass_energy(self) -> float:
        return self.mass * self.energy

    @property
    def gn_constant(self) -> float:
        return self.l4_4 / (math.sqrt(self.l2_sq) * self.h1_sq**1.5)

    @property
    def norm_cap(self) -> float:
        """||Q||_2 ||grad Q||_2."""
        return math.sqrt(self.l2_sq * self.h1_sq)

    def as_dict(self) -> dict:
        return {
            "l2_sq": self.l2_sq,
            "h1_sq": self.h1_sq,
            "l4_4": self.l4_4,
            "energy": self.energy,
            "mass": self.mass,
            "mass_energy": self.mass_energy,
            "gn_constant": self.gn_constant,
        }


def constants(profile: GroundStateProfile) -> GroundStateConstants:
    """Radial quadrature (Simpson on the profile nodes) of the Q norms."""
    r, q = profile.r, profile.q
    dq = profile.node_derivative()
    w = 4.0 * np.pi * r * r
    return GroundStateConstants(
        l2_sq=float(simpson(w * q * q, x=r)),
        h1_sq=float(simpson(w * dq * dq, x=r)),
        l4_4=float(simpson(w * q**4, x=r)),
    )


def _min_image(grid: Grid3, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    X, Y, Z = grid.coords()
    two_L = 2.0 * grid.L
    out = []
    for c, yc in zip((X, Y, Z), y):
        out.append(np.mod(c - yc + grid.L, two_L) - grid.L)
    return out[0], out[1], out[2]


def soliton(grid: Grid3, profile: GroundStateProfile, theta: float = 0.0, y=(0.0, 0.0, 0.0),
            tail_tol: float = 1e-8) -> Field:
    """e^{i theta} Q(x - y) sampled from the profile (nearest periodic image).

    Raises SupportError if Q at half the period exceeds tail_tol * Q(0), i.e.
    the periodic images of the soliton overlap noticeably.
    """
    edge = float(profile.value(np.array([grid.L]))[0]) / profile.q0
    if edge > tail_tol:
        raise SupportError(
            f"soliton tail at half-box distance is {edge:.2e} of Q(0) (> {tail_tol:.0e}); enlarge L"
        )
    dx, dy, dz = _min_image(grid, y)
    r = np.sqrt(dx * dx + dy * dy + dz * dz)
    vals = profile.value(r.ravel()).reshape(grid.shape)
    return Field.adopt(grid, vals * np.exp(1j * theta))


def solve_petviashvili(grid: Grid3, tol: float = 1e-12, max_iter: int = 3000, gamma: float = 1.5,
                       initial: np.ndarray | None = None, residual_tol: float = 1e-7) -> Field:
    """Fixed point of Q = (1 - Laplacian)^{-1} Q^3 with power renormalization.

    Works on the real field with real FFTs. Converged when the renormalization
    factor is within ``tol`` of 1 and the update is below ``tol`` relative.
    """
    if grid.dx > 0.25 or grid.L < 12:
        log.warning("grid n=%d L=%g does not fully resolve Q (want dx <= 0.25, L >= 12); "
                     "the result is the grid ground state, not the continuum one", grid.n, grid.L)
    if grid.shift:
        raise ValueError("Petviashvili expects the origin on the grid (shift = 0)")
    u, it, m = _petviashvili_iterate(grid, tol, max_iter, gamma, initial)
    k2 = grid.wavenumbers**2
    k2 = k2[:, None, None] + k2[None, :, None] + (2.0 * np.pi * sfft.rfftfreq(grid.n, d=grid.dx))[None, None, :] ** 2
    res = float(np.abs(-u + sfft.irfftn(-k2 * sfft.rfftn(u), s=u.shape) + u**3).max())
    log.info("petviashvili n=%d L=%g: %d iterations, m-1=%.2e, residual=%.2e", grid.n, grid.L, it, m - 1, res)
    if res > residual_tol:
        raise ConvergenceError(f"elliptic residual {res:.2e} exceeds {residual_tol:.0e}")
    return Field(grid, u)


def _petviashvili_iterate(grid: Grid3, tol: float, max_iter: int, gamma: float,
                          initial: np.ndarray | None) -> tuple[np.ndarray, int, float]:
    n = grid.n
    k = grid.wavenumbers
    kz = 2.0 * np.pi * sfft.rfftfreq(n, d=grid.dx)
    k2 = k[:, None, None] ** 2 + k[None, :, None] ** 2 + kz[None, None, :] ** 2
    sym = 1.0 + k2
    # each rfft coefficient stands for itself and its conjugate partner, except kz=0 and Nyquist
    wz = np.full(kz.size, 2.0)
    wz[0] = 1.0
    if n % 2 == 0:
        wz[-1] = 1.0
    wz = wz[None, None, :]
    if initial is None:
        X, Y, Z = grid.coords()
        u = 3.0 * np.exp(-(X * X + Y * Y + Z * Z))
    else:
        u = np.array(initial, dtype=float)
    m = float("nan")
    for it in range(1, max_iter + 1):
        uh = sfft.rfftn(u)
        nh = sfft.rfftn(u * u * u)
        num = float((wz * sym * (uh.real**2 + uh.imag**2)).sum())
        den = float((wz * (uh.real * nh.real + uh.imag * nh.imag)).sum())
        m = num / den
        u_new = sfft.irfftn(m**gamma * nh / sym, s=u.shape)
        change = float(np.abs(u_new - u).max()) / float(np.abs(u_new).max())
        u = u_new
        if abs(m - 1.0) < tol and change < tol:
            break
    else:
        raise ConvergenceError(f"Petviashvili did not converge in {max_iter} iterations (m={m!r})")
    return u, it, m


def elliptic_residual(q: Field) -> float:
    """max |-Q + Laplacian Q + Q^3| on the grid."""
    ws = workspace_for(q.grid)
    v = q.values
    lap = ws.laplacian_array(v)
    return float(np.abs(-v + lap + v * np.abs(v) ** 2).max())


class GridGroundState:
    """A real ground state sampled on one grid, with grid-consistent constants.

    Translates are exact Fourier shifts, so every inner product against a
    translate is the same as against the centred field.
    """

    def __init__(self, q: Field, source: str):
        self.grid = q.grid
        self.q = Field(q.grid, q.values.real)
        self.source = source
        ws = workspace_for(self.grid)
        self.qhat = ws.forward(self.q.values)
        self.constants = GroundStateConstants(
            l2_sq=l2_norm_sq(self.q), h1_sq=h1_seminorm_sq(self.q, ws), l4_4=l4_norm_4(self.q)
        )

    @classmethod
    def from_petviashvili(cls, grid: Grid3, tol: float = 1e-12, **kw) -> "GridGroundState":
        return cls(solve_petviashvili(grid, tol=tol, **kw), "petviashvili")

    @classmethod
    def from_profile(cls, grid: Grid3, profile: GroundStateProfile, tail_tol: float = 1e-8) -> "GridGroundState":
        return cls(soliton(grid, profile, 0.0, (0.0, 0.0, 0.0), tail_tol=tail_tol), "profile")

    def shift_phase(self, y) -> np.ndarray:
        """exp(-i k.y) as a broadcastable array (Nyquist modes split as cosines)."""
        g = self.grid
        return (g.shift_factors(y[0])[:, None, None] * g.shift_factors(y[1])[None, :, None]
                * g.shift_factors(y[2])[None, None, :])

    def translate_hat(self, y) -> np.ndarray:
        return self.qhat * self.shift_phase(y)

    def soliton(self, theta: float = 0.0, y=(0.0, 0.0, 0.0)) -> Field:
        ws = workspace_for(self.grid)
        vals = ws.inverse(self.translate_hat(y), overwrite=True)
        if not any(y):
            vals = vals.real.astype(np.complex128)
        return Field.adopt(self.grid, vals * np.exp(1j * theta))

    def translated_arrays(self, y) -> tuple[np.ndarray, list[np.ndarray], np.ndarray]:
        """Q(.-y), grad Q(.-y) and Laplacian Q(.-y) as real arrays."""
        ws = workspace_for(self.grid)
        qh = self.translate_hat(y)
        q = ws.inverse(qh).real
        grads = [ws.inverse(1j * kj * qh).real for kj in ws.k]
        lap = ws.inverse(-ws.k2 * qh).real
        return q, grads, lap


def write_profile(path: str | Path, profile: GroundStateProfile) -> None:
    """JSON header line, then little-endian (r, Q) float64 pairs."""
    header = {
        "format": "nlslab-profile-1",
        "nodes": int(profile.r.size),
        "q0": profile.q0,
        "tail_A": profile.tail_A,
        "tail_mu": profile.tail_mu,
        "r_splice": profile.r_splice,
        "r_max": profile.r_max,
    }
    pairs = np.empty((profile.r.size, 2), dtype="<f8")
    pairs[:, 0] = profile.r
    pairs[:, 1] = profile.q
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(pairs.tobytes())


def read_profile(path: str | Path) -> GroundStateProfile:
    """Load a cached profile; Q' is recovered by re-integrating from Q(0)."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        pairs = np.frombuffer(fh.read(), dtype="<f8").reshape(-1, 2)
    if pairs.shape[0] != header["nodes"]:
        raise ValueError(f"profile cache {path} is truncated")
    r = pairs[:, 0].copy()
    q = pairs[:, 1].copy()
    A, mu, r_s = float(header["tail_A"]), float(header["tail_mu"]), float(header["r_splice"])
    h = float(r[1] - r[0])
    i_s = int(round(r_s / h))
    q_int, p_int = _rk4_shoot(float(q[0]), h, i_s, True)
    dq = None
    if np.allclose(q_int, q[: i_s + 1], rtol=1e-12, atol=0.0):
        dq = np.empty_like(q)
        dq[: i_s + 1] = p_int
        dq[i_s:] = -q[i_s:] * (mu + 1.0 / r[i_s:])
    else:
        log.warning("profile cache %s was not produced by this integrator; using differences for Q'", path)
    return GroundStateProfile(r=r, q=q, tail_A=A, tail_mu=mu, r_splice=r_s, dq=dq)


_default_profile: GroundStateProfile | None = None


def default_profile() -> GroundStateProfile:
    """Process-wide shooting profile with default settings (computed once)."""
    global _default_profile
    if _default_profile is None:
        _default_profile = solve_shooting()
    return _default_profile
