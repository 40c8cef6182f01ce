"""Modulation near the soliton orbit.

u = e^{i theta} (Q(. - y) + g), with (theta, y) fixed by

    Im <e^{i theta} Q(. - y), u> = 0,   Re <e^{i theta} d_j Q(. - y), u> = 0,

and g = alpha Q(. - y) + h with alpha = <g_1(. + y), Lap Q> / <Q, Lap Q>.
Translates of Q are Fourier shifts of a grid ground state, so the four
conditions are weighted sums over the transform of u and cost no FFTs inside
the Newton loop.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diagnostics import delta as delta_fn
from .diagnostics import mass, energy, potential_energy, spatial_center, ThresholdNormalizationError
from .fields import Field, h1_seminorm_sq, inner, l2_norm_sq, workspace_for
from .ground_state import GridGroundState
from .potentials import Potential

__all__ = [
    "ModulationFit",
    "ModulationError",
    "LinearizedOps",
    "orthogonality_residuals",
    "fit",
    "decompose",
    "apply_Lplus",
    "apply_Lminus",
    "bilinear_B",
    "BilinearForm",
    "lyapunov_residual",
    "mass_constraint_residual",
    "ModulationTracker",
    "track",
    "modulation_csv_header",
]

log = logging.getLogger(__name__)


class ModulationError(RuntimeError):
    def __init__(self, msg: str, residual: float = float("nan")):
        super().__init__(msg)
        self.residual = residual


def _wrap(theta: float) -> float:
    return float(math.remainder(theta, 2.0 * math.pi))


@dataclass
class ModulationFit:
    theta: float
    y: tuple[float, float, float]
    g: Field
    alpha: float
    h: Field
    ortho: np.ndarray  # the four conditions at the solution
    iterations: int
    g_h1: float = 0.0
    delta: float = float("nan")
    pot: float = 0.0
    ratio_g: float = float("nan")
    ratio_pot: float = float("nan")
    ratio_decay: float = float("nan")
    ydot_over_delta: float = float("nan")

    @property
    def ortho_resid(self) -> float:
        return float(np.linalg.norm(self.ortho))


class _Conditions:
    """Evaluate the four orthogonality conditions for one field u."""

    def __init__(self, u: Field, ref: GridGroundState):
        if u.grid != ref.grid:
            raise ValueError("field and reference ground state live on different grids")
        ws = workspace_for(u.grid)
        self.grid = u.grid
        self.kd = u.grid.derivative_wavenumbers
        n = u.grid.n
        # P_k = conj(Q_hat) u_hat dv / N
        self.P = np.conj(ref.qhat) * ws.forward(u.values) * (u.grid.dv / n**3)

    def sums(self, y) -> np.ndarray:
        """<Q(.-y), u> and <d_j Q(.-y), u>, j = 1..3."""
        k, g = self.kd, self.grid
        # conjugates of the shift factors used by GridGroundState.translate_hat
        ex, ey, ez = (np.conj(g.shift_factors(c)) for c in y)
        T = self.P @ ez  # (n, n)
        Tz = self.P @ (-1j * k * ez)
        ty = T @ ey
        s0 = ex @ ty
        sx = (-1j * k * ex) @ ty
        sy = ex @ (T @ (-1j * k * ey))
        sz = ex @ (Tz @ ey)
        return np.array([s0, sx, sy, sz])

    def phi(self, theta: float, y) -> np.ndarray:
        s = self.sums(y) * np.exp(-1j * theta)
        return np.array([s[0].imag, s[1].real, s[2].real, s[3].real])

    def phase_guess(self, y) -> float:
        return float(np.angle(self.sums(y)[0]))


def orthogonality_residuals(u: Field, ref: GridGroundState, theta: float, y) -> np.ndarray:
    return _Conditions(u, ref).phi(theta, y)


def _fd_jacobian(cond: _Conditions, z: np.ndarray, step: float = 1e-5) -> np.ndarray:
    J = np.empty((4, 4))
    for i in range(4):
        e = np.zeros(4)
        e[i] = step
        J[:, i] = (cond.phi(z[0] + e[0], z[1:] + e[1:]) - cond.phi(z[0] - e[0], z[1:] - e[1:])) / (2 * step)
    return J


def fit(u: Field, ref: GridGroundState, guess: tuple[float, Sequence[float]] | None = None,
        tol: float = 1e-10, max_iter: int = 50, refresh: int = 5) -> ModulationFit:
    """Solve the orthogonality conditions for (theta, y) by quasi-Newton.

    Starts from the leading-order Jacobian diag(-||Q||^2, ||grad Q||^2/3 I)
    and replaces it by a finite-difference Jacobian every ``refresh``
    iterations. Converged when |conditions| < tol * ||Q||_2^2.
    """
    cond = _Conditions(u, ref)
    c = ref.constants
    if guess is None:
        y0 = np.array(spatial_center(u), dtype=float)
        th0 = cond.phase_guess(y0)
    else:
        th0, y0 = float(guess[0]), np.asarray(guess[1], dtype=float)
    z = np.concatenate([[th0], y0])
    J = np.diag([-c.l2_sq, c.h1_sq / 3.0, c.h1_sq / 3.0, c.h1_sq / 3.0])
    target = tol * c.l2_sq
    res = cond.phi(z[0], z[1:])
    it = 0
    while np.linalg.norm(res) >= target:
        if it >= max_iter:
            raise ModulationError(
                f"modulation fit did not converge in {max_iter} iterations "
                f"(residual {np.linalg.norm(res):.3e}); the field is too far from the soliton orbit",
                float(np.linalg.norm(res)),
            )
        it += 1
        if it % refresh == 0:
            J = _fd_jacobian(cond, z)
        z = z - np.linalg.solve(J, res)
        res = cond.phi(z[0], z[1:])
        if not np.all(np.isfinite(res)):
            raise ModulationError("modulation fit diverged", float("inf"))
    theta = _wrap(z[0])
    y = (float(z[1]), float(z[2]), float(z[3]))
    g, alpha, h = decompose(u, theta, y, ref)
    return ModulationFit(theta=theta, y=y, g=g, alpha=alpha, h=h, ortho=res, iterations=it)


def decompose(u: Field, theta: float, y, ref: GridGroundState) -> tuple[Field, float, Field]:
    """g = e^{-i theta} u - Q(. - y), alpha, h = g - alpha Q(. - y)."""
    q, _, lapq = ref.translated_arrays(y)
    g = u.values * np.exp(-1j * theta) - q
    dv = u.grid.dv
    num = float((g.real * lapq).sum()) * dv
    den = float((ref.q.values.real * workspace_for(u.grid).laplacian_array(ref.q.values).real).sum()) * dv
    alpha = num / den
    h = g - alpha * q
    return Field.adopt(u.grid, g), alpha, Field.adopt(u.grid, h)


# ----------------------------------------------------------- linearized ops

class LinearizedOps:
    """L+ f = -Lap f + f - 3Q^2 f and L- f = -Lap f + f - Q^2 f about Q(. - y)."""

    def __init__(self, ref: GridGroundState, y=(0.0, 0.0, 0.0)):
        self.ref = ref
        self.grid = ref.grid
        self.y = tuple(float(v) for v in y)
        q = ref.q.values.real if not any(self.y) else ref.translated_arrays(self.y)[0]
        self.q2 = q * q
        self.ws = workspace_for(self.grid)

    def _apply(self, f: Field, c: float) -> Field:
        v = f.values
        out = -self.ws.laplacian_array(v) + v - c * self.q2 * v
        return Field.adopt(self.grid, out)

    def plus(self, f: Field) -> Field:
        return self._apply(f, 3.0)

    def minus(self, f: Field) -> Field:
        return self._apply(f, 1.0)


def apply_Lplus(f: Field, y, ref: GridGroundState) -> Field:
    return LinearizedOps(ref, y).plus(f)


def apply_Lminus(f: Field, y, ref: GridGroundState) -> Field:
    return LinearizedOps(ref, y).minus(f)


@dataclass
class BilinearForm:
    value: float  # 1/2 <L+ g1, g1> + 1/2 <L- g2, g2>
    integral: float  # int 1/2|grad g|^2 + 1/2|g|^2 - (3/2 g1^2 + 1/2 g2^2) Q^2


def bilinear_B(g: Field, y, ref: GridGroundState) -> BilinearForm:
    ops = LinearizedOps(ref, y)
    g1 = Field.adopt(g.grid, g.values.real.astype(np.complex128))
    g2 = Field.adopt(g.grid, g.values.imag.astype(np.complex128))
    op = 0.5 * inner(ops.plus(g1), g1).real + 0.5 * inner(ops.minus(g2), g2).real
    dv = g.grid.dv
    a1, a2 = g.values.real, g.values.imag
    integ = (0.5 * h1_seminorm_sq(g, ops.ws) + 0.5 * l2_norm_sq(g)
             - float(((1.5 * a1 * a1 + 0.5 * a2 * a2) * ops.q2).sum()) * dv)
    return BilinearForm(value=float(op), integral=float(integ))


def _check_threshold(u: Field, p: Potential, ref: GridGroundState, tol: float) -> None:
    c = ref.constants
    m, e = mass(u), energy(u, p)
    if abs(m / c.mass - 1) > tol or abs(e / c.energy - 1) > tol:
        raise ThresholdNormalizationError(
            f"M(u)/M(Q) - 1 = {m / c.mass - 1:.2e}, E_V(u)/E_0(Q) - 1 = {e / c.energy - 1:.2e}"
        )


def lyapunov_residual(u: Field, mfit: ModulationFit, p: Potential, ref: GridGroundState,
                      tol: float = 1e-6) -> float:
    """r = B(g) + 1/2 int V|u|^2, which is O(||g||^3) at threshold normalization."""
    _check_threshold(u, p, ref, tol)
    b = bilinear_B(mfit.g, mfit.y, ref).value
    return b + 0.5 * potential_energy(u, p)


def mass_constraint_residual(mfit: ModulationFit, ref: GridGroundState) -> dict:
    """Residuals of the mass expansion M((1+alpha)Q(.-y) + h) = M(Q), relative to ||Q||^2.

    ``exact`` keeps the cross term 2 alpha <Q(.-y), h1>; ``truncated`` drops it
    (that form is only accurate to O(alpha ||h||)).
    """
    q = ref.translated_arrays(mfit.y)[0]
    dv = mfit.h.grid.dv
    qn = ref.constants.l2_sq
    a = mfit.alpha
    qh = float((q * mfit.h.values.real).sum()) * dv
    hh = l2_norm_sq(mfit.h)
    trunc = a * a * qn + 2 * a * qn + 2 * qh + hh
    exact = trunc + 2 * a * qh
    return {"exact": exact / qn, "truncated": trunc / qn}


# ----------------------------------------------------------------- tracking

def _attach_ratios(mf: ModulationFit, u: Field, p: Potential, ref: GridGroundState) -> None:
    g = mf.g
    mf.g_h1 = math.sqrt(l2_norm_sq(g) + h1_seminorm_sq(g))
    mf.pot = potential_energy(u, p)
    mf.delta = delta_fn(u, p, ref.constants)
    ny = math.sqrt(sum(c * c for c in mf.y))
    if mf.delta > 0:
        mf.ratio_g = mf.g_h1 / mf.delta
        mf.ratio_pot = math.sqrt(max(mf.pot, 0.0)) / mf.delta
        mf.ratio_decay = (math.exp(-2 * ny) / ny**2) / mf.delta if ny > 0 else float("inf")


class ModulationTracker:
    """Hook for ``evolve``: fits every sample while delta stays below the gate.

    Fitting is seeded by the previous slice. The window ends at the first
    slice that leaves the gate or fails to fit.
    """

    def __init__(self, ref: GridGroundState, p: Potential, delta_gate: float | None = None,
                 guess: tuple[float, Sequence[float]] | None = None):
        self.ref = ref
        self.p = p
        self.delta_gate = 0.1 * ref.constants.h1_sq if delta_gate is None else delta_gate
        self.guess = guess
        self.times: list[float] = []
        self.fits: list[ModulationFit] = []
        self.closed = False
        self.note = ""

    def __call__(self, t: float, u: Field) -> None:
        if self.closed:
            return
        d = delta_fn(u, self.p, self.ref.constants)
        if abs(d) >= self.delta_gate:
            if self.fits:
                self.closed = True
                self.note = f"left delta gate at t={t:.6g}"
            return
        try:
            mf = fit(u, self.ref, self.guess)
        except ModulationError as exc:
            self.closed = True
            self.note = f"fit failed at t={t:.6g}: {exc}"
            log.warning(self.note)
            return
        _attach_ratios(mf, u, self.p, self.ref)
        if self.fits:
            # continuous phase for the guess and the series
            prev = self.fits[-1].theta
            mf.theta = prev + _wrap(mf.theta - prev)
        self.guess = (mf.theta, mf.y)
        self.times.append(t)
        self.fits.append(mf)

    def finalize(self) -> list[ModulationFit]:
        """Fill |ydot|/delta by centred differences (one-sided at the ends)."""
        n = len(self.fits)
        if n >= 2:
            t = np.array(self.times)
            Y = np.array([f.y for f in self.fits])
            dY = np.gradient(Y, t, axis=0)
            for f, v in zip(self.fits, np.linalg.norm(dY, axis=1)):
                if f.delta > 0:
                    f.ydot_over_delta = float(v) / f.delta
        return self.fits

    def rows(self) -> list[list[float]]:
        out = []
        for t, f in zip(self.times, self.fits):
            out.append([t, f.theta, *f.y, f.alpha, f.g_h1, f.delta, f.ratio_g, f.ratio_pot,
                        f.ratio_decay, f.ydot_over_delta, f.ortho_resid])
        return out


def modulation_csv_header() -> list[str]:
    return ["t", "theta", "y_x", "y_y", "y_z", "alpha", "g_H1", "delta", "ratio_g", "ratio_pot",
            "ratio_decay", "ydot_over_delta", "ortho_resid"]


def track(times: Sequence[float], fields: Sequence[Field], ref: GridGroundState, p: Potential,
          delta_gate: float | None = None, guess=None) -> ModulationTracker:
    """Fit a stored sequence of fields (see ModulationTracker)."""
    tr = ModulationTracker(ref, p, delta_gate, guess)
    for t, u in zip(times, fields):
        tr(t, u)
    tr.finalize()
    return tr
