"""Scenarios: initial data, threshold tuning, runs and reports.

A scenario is a flat key/value table (TOML without sub-tables). ``run``
evolves it, records diagnostics and modulation series, evaluates the
invariant monitors and returns a ``Report``; ``report_emit`` writes it out.
"""

from __future__ import annotations

import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.optimize import brentq, minimize_scalar
from scipy.stats import spearmanr

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .diagnostics import (
    Diagnostics,
    csv_header,
    energy,
    mass,
    potential_energy,
    r_label,
    scattering_proxy,
    spatial_center,
    virial_identity_residual,
    write_csv,
)
from .evolution import PropagatorConfig, evolve
from .fields import Field, Grid3, h1_seminorm_sq, l2_norm_sq, l4_norm_4, sample, workspace_for
from .ground_state import (
    GridGroundState,
    GroundStateConstants,
    SupportError,
    constants,
    default_profile,
)
from .modulation import ModulationTracker, modulation_csv_header
from .potentials import Potential, potential_from_config, validate_class

__all__ = [
    "Scenario",
    "ScenarioError",
    "TuningError",
    "TuningResult",
    "Report",
    "BUILTINS",
    "builtin",
    "load_scenario",
    "scenario_to_toml",
    "reference_state",
    "perturbation",
    "initial_data",
    "tune_to_threshold",
    "dilate",
    "run",
    "report_emit",
]

log = logging.getLogger(__name__)


class ScenarioError(ValueError):
    pass


class TuningError(ValueError):
    """No admissible threshold amplitude; the message names the failing constraint."""


# ------------------------------------------------------------------ scenario

@dataclass(frozen=True)
class Scenario:
    name: str = "custom"
    # grid
    n: int = 64
    L: float = 16.0
    # potential (flat keys potential_*)
    potential: str = "zero"
    potential_a: float = 1.0
    potential_eps: float | None = None
    potential_c: float = 1.0
    potential_sigma: float = 1.0
    # initial data
    recipe: str = "gaussian"  # gaussian | soliton | soliton-perturbed
    amplitude: float = 1.0
    width: float = 1.0
    y0: tuple[float, float, float] = (0.0, 0.0, 0.0)
    theta0: float = 0.0
    eps: float = 0.0
    perturbation_width: float = 1.0
    tail_tol: float = 1e-8
    ground_state: str = "grid"  # grid (Petviashvili on this grid) | profile (shooting)
    # tuning: none | subthreshold | product | exact
    tuning: str = "none"
    margin: float = 0.05
    # propagation
    dt: float = 5e-4
    t_end: float = 1.0
    stride: int = 10
    splitting: str = "strang"
    dealias: bool = False
    # diagnostics
    R: tuple[float, ...] = (2.0, 5.0, math.inf)
    track_modulation: bool = False
    delta_gate: float | None = None
    expect_blowup: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.recipe not in ("gaussian", "soliton", "soliton-perturbed"):
            raise ScenarioError(f"unknown recipe {self.recipe!r}")
        if self.tuning not in ("none", "subthreshold", "product", "exact"):
            raise ScenarioError(f"unknown tuning {self.tuning!r}")
        if self.ground_state not in ("grid", "profile"):
            raise ScenarioError(f"unknown ground_state {self.ground_state!r}")
        object.__setattr__(self, "y0", tuple(float(v) for v in self.y0))
        object.__setattr__(self, "R", tuple(float(v) for v in self.R))
        if len(self.y0) != 3:
            raise ScenarioError("y0 needs three components")

    @property
    def grid(self) -> Grid3:
        return Grid3(self.n, self.L)

    @property
    def potential_obj(self) -> Potential:
        return potential_from_config({
            "kind": self.potential, "a": self.potential_a, "eps": self.potential_eps,
            "c": self.potential_c, "sigma": self.potential_sigma,
        }).resolve(self.grid)

    @property
    def propagator(self) -> PropagatorConfig:
        return PropagatorConfig(dt=self.dt, t_end=self.t_end, potential=self.potential_obj,
                                splitting=self.splitting, dealias=self.dealias, stride=self.stride)

    @classmethod
    def from_mapping(cls, d: dict) -> "Scenario":
        known = {f.name for f in fields(cls)}
        bad = [k for k in d if k not in known]
        if bad:
            raise ScenarioError(f"unknown scenario keys: {', '.join(sorted(bad))}")
        for k, v in d.items():
            if isinstance(v, dict):
                raise ScenarioError(f"key {k!r}: nested tables are not allowed (flat keys only)")
        kw = dict(d)
        for k in ("y0", "R"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)


def load_scenario(path: str | Path) -> Scenario:
    with open(path, "rb") as fh:
        return Scenario.from_mapping(tomllib.load(fh))


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} as TOML")


def scenario_to_toml(s: Scenario) -> str:
    lines = []
    for f in fields(s):
        v = getattr(s, f.name)
        if v is None:
            continue
        lines.append(f"{f.name} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"


BUILTINS: dict[str, Scenario] = {
    # small Gaussian over a repulsive bump; disperses
    "subthreshold-gaussian": Scenario(
        name="subthreshold-gaussian", n=64, L=16.0,
        potential="gaussian_bump", potential_c=1.0, potential_sigma=1.0,
        recipe="gaussian", amplitude=1.0, width=1.0, ground_state="profile",
        dt=5e-4, t_end=2.0, stride=10,
    ),
    # the solitary wave e^{it} Q_h, no potential
    "soliton-free": Scenario(
        name="soliton-free", n=64, L=8.0, recipe="soliton", ground_state="grid",
        dt=2.5e-4, t_end=1.0, stride=10, track_modulation=True,
    ),
    # Q_h(. - y0) + eps*phi, tuned to M = M(Q), E_V = E_0(Q), bump at the origin
    "threshold-far-soliton": Scenario(
        name="threshold-far-soliton", n=64, L=8.0,
        potential="gaussian_bump", potential_c=1.0, potential_sigma=1.0,
        recipe="soliton-perturbed", y0=(4.0, 0.0, 0.0), eps=0.02, perturbation_width=1.0,
        ground_state="grid", tuning="exact",
        dt=2.5e-4, t_end=1.0, stride=10, track_modulation=True,
    ),
}


def builtin(name: str, **overrides) -> Scenario:
    try:
        s = BUILTINS[name]
    except KeyError:
        raise ScenarioError(f"no builtin scenario {name!r}; have {', '.join(BUILTINS)}") from None
    return replace(s, **overrides) if overrides else s


# ------------------------------------------------------------- initial data

def reference_state(s: Scenario) -> tuple[GroundStateConstants, GridGroundState | None]:
    """Constants used for delta and thresholds, plus a grid ground state if one is needed."""
    grid = s.grid
    needs_field = s.recipe != "gaussian" or s.track_modulation
    if s.ground_state == "grid":
        ref = GridGroundState.from_petviashvili(grid)
        return ref.constants, ref
    prof = default_profile()
    ref = GridGroundState.from_profile(grid, prof, tail_tol=s.tail_tol) if needs_field else None
    return constants(prof), ref


def perturbation(ref: GridGroundState, y0, width: float = 1.0, seed: int = 0) -> Field:
    """Smooth complex bump near y0, orthogonal to Q, grad Q and Lap Q at y0, unit H^1 norm.

    The seed picks the bump's offset direction (length width/2) and phase.
    """
    grid = ref.grid
    rng = np.random.default_rng(seed)
    d = rng.normal(size=3)
    d *= 0.5 * width / np.linalg.norm(d)
    c = np.exp(1j * rng.uniform(0, 2 * np.pi))
    cx, cy, cz = (float(y0[j] + d[j]) for j in range(3))

    def bump(X, Y, Z):
        return c * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2 + (Z - cz) ** 2) / (2 * width**2))

    f = sample(grid, bump).values.copy()
    q, grads, lap = ref.translated_arrays(y0)
    dv = grid.dv
    # modified Gram-Schmidt on the real basis; complex coefficients handle both parts
    basis: list[np.ndarray] = []
    for b in [q, *grads, lap]:
        v = b.copy()
        for e in basis:
            v -= float((e * v).sum()) * dv * e
        v /= math.sqrt(float((v * v).sum()) * dv)
        basis.append(v)
    for e in basis:
        f -= complex((e * f).sum()) * dv * e
    phi = Field.adopt(grid, f)
    nrm = math.sqrt(l2_norm_sq(phi) + h1_seminorm_sq(phi))
    return Field.adopt(grid, f / nrm)


def _check_tail(u: Field, tol: float, what: str) -> None:
    """Largest |u| on the box faces relative to max |u|."""
    a = np.abs(u.values)
    face = max(float(a[0].max()), float(a[:, 0].max()), float(a[:, :, 0].max()))
    rel = face / float(a.max())
    if rel > tol:
        raise SupportError(f"{what}: boundary value {rel:.2e} of the peak exceeds tail tolerance {tol:.1e}; "
                           "enlarge L or move the data inward")


def initial_data(s: Scenario, ref: GridGroundState | None) -> Field:
    grid = s.grid
    if s.recipe == "gaussian":
        y, w, a = s.y0, s.width, s.amplitude
        u = sample(grid, lambda X, Y, Z: a * np.exp(
            -((X - y[0]) ** 2 + (Y - y[1]) ** 2 + (Z - y[2]) ** 2) / (2 * w * w) + 1j * s.theta0))
        _check_tail(u, s.tail_tol, "gaussian recipe")
        return u
    if ref is None:  # pragma: no cover - reference_state always builds one here
        raise ScenarioError("soliton recipes need a ground state")
    u = ref.soliton(s.theta0, s.y0)
    if s.recipe == "soliton-perturbed" and s.eps != 0.0:
        phi = perturbation(ref, s.y0, s.perturbation_width, s.seed)
        u = Field.adopt(grid, u.values + s.eps * np.exp(1j * s.theta0) * phi.values)
    return u


# ------------------------------------------------------------------- tuning

@dataclass
class TuningResult:
    lam: float
    mu: float
    field: Field
    variant: str
    rel_product: float  # |M E_V - M(Q)E_0(Q)| / M(Q)E_0(Q)
    rel_mass: float
    rel_energy: float
    cap_ratio: float  # ||u||_2 ||u||_{H^1_V} / (||Q||_2 ||grad Q||_2)

    def __iter__(self):
        yield self.lam
        yield self.field

    def certificate(self) -> dict:
        return {
            "variant": self.variant, "lambda": self.lam, "mu": self.mu,
            "rel_product_residual": self.rel_product, "rel_mass_residual": self.rel_mass,
            "rel_energy_residual": self.rel_energy, "cap_ratio": self.cap_ratio,
        }


def _norms(u: Field, p: Potential) -> tuple[float, float, float]:
    """||u||_2^2, ||u||^2_{H^1_V}, ||u||_4^4."""
    return l2_norm_sq(u), h1_seminorm_sq(u) + potential_energy(u, p), l4_norm_4(u)


def _result(u: Field, lam: float, mu: float, p: Potential, c: GroundStateConstants, variant: str) -> TuningResult:
    m2, a, b = _norms(u, p)
    M = 0.5 * m2
    E = 0.5 * a - 0.25 * b
    target = c.mass_energy
    return TuningResult(
        lam=lam, mu=mu, field=u, variant=variant,
        rel_product=abs(M * E - target) / target,
        rel_mass=abs(M - c.mass) / c.mass,
        rel_energy=abs(E - c.energy) / c.energy,
        cap_ratio=math.sqrt(m2 * a) / c.norm_cap,
    )


def _product_amplitude(m2: float, a: float, b: float, target: float, cap: float) -> float:
    """Smallest s = lambda^2 with M E_V(lambda psi) = target, on the branch below the cap."""
    def h(s):
        return 0.25 * m2 * a * s * s - 0.125 * m2 * b * s**3

    s_star = 4.0 * a / (3.0 * b)  # maximizer of h
    top = h(s_star)
    if top < target * (1.0 - 1e-12):
        raise TuningError(
            f"energy constraint: the largest M*E_V along lambda*psi is {top:.6g} < M(Q)E_0(Q) = {target:.6g}"
        )
    if top <= target * (1.0 + 1e-12):
        s = s_star  # tangent: psi is (a multiple of) a threshold optimizer
    else:
        lo, hi = 0.0, s_star
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if h(mid) < target:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-16 * hi:
                break
        s = 0.5 * (lo + hi)
    if s * math.sqrt(m2 * a) > cap * (1.0 + 1e-10):
        raise TuningError(
            f"norm cap: the threshold amplitude gives ||u||_2||u||_H1V = {s * math.sqrt(m2 * a):.6g} "
            f">= ||Q||_2||grad Q||_2 = {cap:.6g}"
        )
    return s


def _resampler(grid: Grid3, mu: float, c: float = 0.0) -> np.ndarray:
    """Matrix evaluating the trigonometric interpolant at c + mu (x - c) along one axis.

    x - c is taken as the minimum periodic image, so the far side of the box
    is never folded onto the data.
    """
    n = grid.n
    x = grid.axis
    k = grid.wavenumbers
    L = grid.L
    pts = c + mu * (np.mod(x - c + L, 2 * L) - L)
    # f(p_i) = sum_j f_j (1/n) sum_k e^{i k (p_i - x_j)}
    E = np.exp(1j * np.outer(pts, k))
    F = np.exp(-1j * np.outer(k, x)) / n
    # the Nyquist mode is split symmetrically so real data stay real
    ny = n // 2
    E[:, ny] = np.cos(k[ny] * pts)
    return E @ F


def dilate(u: Field, mu: float, center=(0.0, 0.0, 0.0)) -> Field:
    """u(c + mu (x - c)) by separable trigonometric interpolation (periodic)."""
    if mu == 1.0:
        return u
    Ax, Ay, Az = (_resampler(u.grid, mu, float(center[j])) for j in range(3))
    v = u.values
    v = np.tensordot(Ax, v, axes=(1, 0))
    v = np.tensordot(Ay, v, axes=(1, 1)).transpose(1, 0, 2)
    v = np.tensordot(Az, v, axes=(1, 2)).transpose(1, 2, 0)
    return Field.adopt(u.grid, np.ascontiguousarray(v))


def tune_to_threshold(psi: Field, p: Potential, consts: GroundStateConstants, variant: str = "product",
                      target_fraction: float = 1.0, mu_bounds: tuple[float, float] = (0.7, 1.3),
                      center=None, tail_tol: float | None = None) -> TuningResult:
    """Scale psi onto the threshold below the norm cap.

    ``product``: u = lambda*psi with M(u)E_V(u) = target_fraction * M(Q)E_0(Q)
    (closed-form cubic in lambda^2, bisected). ``exact``:
    u = lambda*psi(c + mu(x - c)) with M(u) = M(Q) exactly and E_V(u) = E_0(Q),
    taking the lower root in mu (the one under the cap). The dilation centre c
    defaults to the spatial centre of psi, so off-centre data are not pushed
    across the periodic boundary. Raises TuningError naming the failing constraint.
    Iterating the result yields (lambda, field).
    """
    p = p.resolve(psi.grid)
    m2, a, b = _norms(psi, p)
    if m2 == 0.0:
        raise TuningError("psi is zero")
    if variant == "product":
        s = _product_amplitude(m2, a, b, target_fraction * consts.mass_energy, consts.norm_cap)
        lam = math.sqrt(s)
        return _result(psi * lam, lam, 1.0, p, consts, "product")
    if variant != "exact":
        raise ValueError(f"unknown tuning variant {variant!r}")
    if target_fraction != 1.0:
        raise ValueError("the exact variant tunes to the threshold itself")

    E0, Mq = consts.energy, consts.l2_sq
    c = spatial_center(psi) if center is None else tuple(float(v) for v in center)

    def state(mu: float) -> tuple[Field, float]:
        v = dilate(psi, mu, c)
        lam = math.sqrt(Mq / l2_norm_sq(v))
        return v * lam, lam

    def f(mu: float) -> float:
        return energy(state(mu)[0], p) - E0

    opt = minimize_scalar(lambda m: -f(m), bounds=mu_bounds, method="bounded", options={"xatol": 1e-10})
    mu_top, f_top = float(opt.x), -float(opt.fun)
    if f_top < -1e-12 * E0:
        raise TuningError(
            f"energy constraint: at mass M(Q) the largest E_V over dilations mu in "
            f"[{mu_bounds[0]:g}, {mu_bounds[1]:g}] is below E_0(Q) by {-f_top:.3e}"
        )
    tangent = f_top <= 1e-12 * E0
    if tangent:
        mu = mu_top  # psi on the soliton orbit; mu is only known to the optimizer tolerance
    else:
        lo = mu_bounds[0]
        if f(lo) >= 0.0:
            raise TuningError(
                f"support: the admissible root needs mu < {lo:g}, spreading the data past the box; "
                "the threshold regime also requires ||u||_2||u||_H1V < ||Q||_2||grad Q||_2"
            )
        mu = brentq(f, lo, mu_top, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    u, lam = state(mu)
    if tail_tol is not None:
        _check_tail(u, tail_tol, "tuned data")
    res = _result(u, lam, mu, p, consts, "exact")
    if res.cap_ratio > 1.0 + (1e-8 if tangent else 1e-10):
        raise TuningError(f"norm cap: tuned data have cap ratio {res.cap_ratio:.6g} >= 1")
    return res


# --------------------------------------------------------------------- runs

@dataclass
class Report:
    scenario: Scenario
    summary: dict
    diag_header: list[str]
    diag_rows: list[list[float]]
    mod_rows: list[list[float]] = field(default_factory=list)
    trajectory: Any = None

    @property
    def passed(self) -> bool:
        return all(m["pass"] for m in self.summary["monitors"].values() if m["applicable"])


def _monitor(applicable: bool, ok: bool, value, bound=None, note: str = "") -> dict:
    d = {"applicable": bool(applicable), "pass": bool(ok) if applicable else True, "value": value}
    if bound is not None:
        d["bound"] = bound
    if note:
        d["note"] = note
    return d


def _f(x) -> float | None:
    x = float(x)
    return x if math.isfinite(x) else None


def _anticorrelation(delta: np.ndarray, xnorm: np.ndarray, bins: int = 4) -> dict:
    if delta.size < bins or np.ptp(delta) == 0:
        return {"table": [], "spearman": None}
    edges = np.quantile(delta, np.linspace(0, 1, bins + 1))
    table = []
    for i in range(bins):
        sel = (delta >= edges[i]) & ((delta <= edges[i + 1]) if i == bins - 1 else (delta < edges[i + 1]))
        if sel.any():
            table.append({"delta_lo": float(edges[i]), "delta_hi": float(edges[i + 1]),
                          "mean_abs_x": float(xnorm[sel].mean()), "count": int(sel.sum())})
    rho = spearmanr(delta, xnorm).statistic if np.ptp(xnorm) > 0 else float("nan")
    return {"table": table, "spearman": _f(rho)}


def run(s: Scenario, keep_fields_every: int = 0) -> Report:
    """Evolve a scenario and evaluate its monitors."""
    t_start = time.perf_counter()
    grid = s.grid
    p = s.potential_obj
    consts, ref = reference_state(s)
    pot_report = validate_class(p, grid, samples=2**14, seed=s.seed).as_dict() if not p.is_zero else None

    u0 = initial_data(s, ref)
    tuning = None
    if s.tuning == "subthreshold":
        tr = tune_to_threshold(u0, p, consts, "product", target_fraction=1.0 - s.margin)
        u0, tuning = tr.field, tr.certificate()
    elif s.tuning in ("product", "exact"):
        tr = tune_to_threshold(u0, p, consts, s.tuning)
        u0, tuning = tr.field, tr.certificate()

    m2, a, b = _norms(u0, p)
    me_ratio = (0.5 * m2) * (0.5 * a - 0.25 * b) / consts.mass_energy
    cap_ratio = math.sqrt(m2 * a) / consts.norm_cap
    under_cap = cap_ratio < 1.0 - 1e-9

    diag = Diagnostics(grid, p, consts, s.R)
    hooks = []
    tracker = None
    if s.track_modulation:
        if ref is None:  # pragma: no cover
            raise ScenarioError("modulation tracking needs a ground state field")
        guess = (s.theta0, s.y0) if s.recipe != "gaussian" else None
        tracker = ModulationTracker(ref, p, s.delta_gate, guess)
        hooks.append(tracker)
    traj = evolve(u0, s.propagator, hooks=hooks, diag=diag, keep_fields_every=keep_fields_every)
    if tracker is not None:
        tracker.finalize()

    rows = traj.rows
    t = np.array(traj.times)
    M = np.array([r.M for r in rows])
    E = np.array([r.E_V for r in rows])
    dl = np.array([r.delta for r in rows])
    L4 = np.array([r.L4 for r in rows])
    h1 = np.array([r.h1 for r in rows])
    Finf = np.array([r.F_inf_0 for r in rows])
    unit = consts.h1_sq

    w1 = t <= 1.0 + 1e-9
    mass_drift = float(np.max(np.abs(M[w1] - M[0]))) / M[0]
    energy_drift = float(np.max(np.abs(E[w1] - E[0])))
    mass_drift_all = float(np.max(np.abs(M - M[0]))) / M[0]
    energy_drift_all = float(np.max(np.abs(E - E[0])))

    virial = {}
    if t.size >= 3:
        res = virial_identity_residual(t, rows, s.R, s.dt, unit)
        virial = {r_label(R): float(np.max(np.abs(v))) for R, v in res.items()}

    proxy = scattering_proxy(t, [r.l5 for r in rows], L4)
    centers = np.array([r.center for r in rows])
    xnorm = np.linalg.norm(centers, axis=1)
    rep_min = min(min(r.repulsive.values()) for r in rows)

    monitors = {
        "mass_drift": _monitor(True, mass_drift < 1e-10, mass_drift, 1e-10),
        "energy_drift": _monitor(True, energy_drift < 1e-6, energy_drift, 1e-6),
        "delta_positive": _monitor(under_cap, bool(np.all(dl > 0)), float(dl.min()),
                                   note="" if under_cap else "state on the norm cap"),
        "gn_squeeze": _monitor(under_cap, bool(np.all(L4 < (4.0 / 3.0) * h1)),
                               float(np.max(L4 / ((4.0 / 3.0) * h1)))),
        "repulsive_term_nonnegative": _monitor(True, rep_min >= 0.0, rep_min),
        "Finf0_over_delta_positive": _monitor(under_cap, bool(np.all(Finf / dl > 0)) if under_cap else True,
                                              float(np.min(Finf / dl)) if under_cap else None),
        "no_blowup": _monitor(not s.expect_blowup, traj.blowup is None,
                              None if traj.blowup is None else traj.blowup.t),
    }
    if s.tuning == "product" or s.tuning == "exact":
        monitors["tuning_certificate"] = _monitor(True, tuning["rel_product_residual"] < 1e-8,
                                                  tuning["rel_product_residual"], 1e-8)

    modsum = None
    mod_rows: list[list[float]] = []
    if tracker is not None:
        mod_rows = tracker.rows()
        fits = tracker.fits
        modsum = {"samples": len(fits), "note": tracker.note}
        if fits:
            tm = np.array(tracker.times)
            th = np.array([f.theta for f in fits])
            Y = np.array([f.y for f in fits])
            modsum.update({
                "window": [float(tm[0]), float(tm[-1])],
                "theta_minus_t_max": float(np.max(np.abs(th - th[0] - (tm - tm[0])))),
                "theta_rate": float(np.polyfit(tm, th, 1)[0]) if tm.size > 1 else None,
                "y_start": [float(v) for v in Y[0]],
                "y_end": [float(v) for v in Y[-1]],
                "ortho_resid_max": float(max(f.ortho_resid for f in fits)),
                "center_minus_y_max": float(np.max(np.linalg.norm(
                    centers[np.searchsorted(t, tm)] - Y, axis=1))),
            })
            for key in ("ratio_g", "ratio_pot", "ratio_decay", "ydot_over_delta"):
                vals = np.array([getattr(f, key) for f in fits], dtype=float)
                vals = vals[np.isfinite(vals)]
                modsum[key] = [float(vals.min()), float(vals.max())] if vals.size else None

    summary = {
        "scenario": s.name,
        "grid": {"n": s.n, "L": s.L, "dx": grid.dx},
        "reference": {"source": s.ground_state, **consts.as_dict()},
        "potential": pot_report,
        "initial": {"M": float(M[0]), "E_V": float(E[0]), "ME_over_threshold": me_ratio,
                    "cap_ratio": cap_ratio, "under_cap": under_cap, "delta": float(dl[0])},
        "tuning": tuning,
        "samples": int(t.size),
        "t_final": float(t[-1]),
        "conservation": {"mass_drift_t1": mass_drift, "energy_drift_t1": energy_drift,
                         "mass_drift": mass_drift_all, "energy_drift": energy_drift_all},
        "virial_residual_max": virial,
        "delta_record": {"min": float(dl.min()), "max": float(dl.max()),
                         "all_positive": bool(np.all(dl > 0)), "first": float(dl[0]), "last": float(dl[-1])},
        "scattering_proxy": {"verdict": proxy.verdict,
                             "last_quarter_fraction": proxy.last_quarter_fraction,
                             "l4_decay_exponent": proxy.l4_decay_exponent,
                             "regime": "scattering-like" if proxy.verdict == "saturating" else "non-scattering"},
        "center_path": {"start": [float(v) for v in centers[0]], "end": [float(v) for v in centers[-1]],
                        "max_abs": float(xnorm.max())},
        "anticorrelation": _anticorrelation(dl, xnorm),
        "modulation": modsum,
        "blowup": None if traj.blowup is None else asdict(traj.blowup),
        "monitors": monitors,
        "wall_seconds": time.perf_counter() - t_start,
    }
    hdr = csv_header(s.R)
    report = Report(s, summary, hdr, [r.csv_values(s.R) for r in rows], mod_rows, traj)
    report.summary["passed"] = report.passed
    return report


_PLOT = """# gnuplot script; run from this directory: gnuplot plot.gp
set datafile separator ','
set key autotitle columnhead
set terminal pngcairo size 1000,700
set output 'diagnostics.png'
set multiplot layout 2,2 title '{name}'
set xlabel 't'
plot 'diagnostics.csv' using 1:2 with lines title 'M', '' using 1:3 with lines title 'E_V'
plot 'diagnostics.csv' using 1:7 with lines title 'delta'
plot 'diagnostics.csv' using 1:{p_col} with lines title 'P_R (R={r0})'
plot 'diagnostics.csv' using 1:{l5_col} with lines title '|u|_5^5'
unset multiplot
{mod}"""

_PLOT_MOD = """set output 'modulation.png'
set multiplot layout 1,2 title 'modulation'
plot 'modulation.csv' using 1:2 with lines title 'theta'
plot 'modulation.csv' using 1:9 with lines title 'g_H1/delta', '' using 1:12 with lines title '|ydot|/delta'
unset multiplot
"""


def report_emit(report: Report, out_dir: str | Path) -> list[Path]:
    """Write report.json, diagnostics.csv, modulation.csv, scenario.toml and plot.gp."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    rj = out / "report.json"
    rj.write_text(json.dumps(_jsonable(report.summary), indent=2, sort_keys=True) + "\n")
    paths.append(rj)
    dc = out / "diagnostics.csv"
    write_csv(dc, report.diag_header, report.diag_rows)
    paths.append(dc)
    mc = out / "modulation.csv"
    write_csv(mc, modulation_csv_header(), report.mod_rows)
    paths.append(mc)
    sc = out / "scenario.toml"
    sc.write_text(scenario_to_toml(report.scenario))
    paths.append(sc)
    hdr = report.diag_header
    pg = out / "plot.gp"
    pg.write_text(_PLOT.format(
        name=report.scenario.name,
        p_col=hdr.index(f"P_R{r_label(report.scenario.R[0])}") + 1,
        r0=r_label(report.scenario.R[0]),
        l5_col=hdr.index("l5_increment") + 1,
        mod=_PLOT_MOD if report.mod_rows else "",
    ))
    paths.append(pg)
    return paths


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x
