"""Periodic grids, complex fields, spectral derivatives and quadrature.

All integrals are nodal sums times dx**3. Arrays are stored with axes
(x, y, z); the flat layout used for snapshots is x-fastest, which is numpy
Fortran order on that array.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.fft as sfft

__all__ = [
    "Grid3",
    "Field",
    "GridMismatchError",
    "SpectralWorkspace",
    "workspace_for",
    "sample",
    "l2_norm_sq",
    "l4_norm_4",
    "inner",
    "gradient",
    "laplacian",
    "h1_seminorm_sq",
    "write_snapshot",
    "read_snapshot",
]


class GridMismatchError(ValueError):
    """Raised when two fields on different grids are combined."""


@dataclass(frozen=True)
class Grid3:
    """Cubic periodic box [-L, L)^3 with n points per axis.

    ``shift`` offsets the nodes by a fraction of a cell; it is only needed to
    keep the origin off the lattice for singular potentials.
    """

    n: int
    L: float
    shift: float = 0.0

    def __post_init__(self) -> None:
        n = int(self.n)
        if n != self.n or n < 8 or n & (n - 1):
            raise ValueError(f"n must be a power of two >= 8, got {self.n}")
        if not (self.L > 0 and np.isfinite(self.L)):
            raise ValueError(f"half width must be positive, got {self.L}")
        if not 0.0 <= self.shift < 1.0:
            raise ValueError("shift must lie in [0, 1)")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "L", float(self.L))
        object.__setattr__(self, "shift", float(self.shift))

    @property
    def dx(self) -> float:
        return 2.0 * self.L / self.n

    @property
    def dv(self) -> float:
        return self.dx**3

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n, self.n, self.n)

    @property
    def size(self) -> int:
        return self.n**3

    @cached_property
    def axis(self) -> np.ndarray:
        return -self.L + self.dx * (np.arange(self.n) + self.shift)

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        # pi*m/L in the standard FFT ordering, m in [-n/2, n/2)
        return 2.0 * np.pi * sfft.fftfreq(self.n, d=self.dx)

    @cached_property
    def derivative_wavenumbers(self) -> np.ndarray:
        """Wavenumbers for odd derivatives; the Nyquist entry is zeroed so real stays real."""
        k = self.wavenumbers.copy()
        k[self.n // 2] = 0.0
        return k

    def shift_factors(self, y: float) -> np.ndarray:
        """exp(-i k y) along one axis, with the Nyquist mode split as cos(k y)."""
        k = self.wavenumbers
        e = np.exp(-1j * k * y)
        ny = self.n // 2
        e[ny] = np.cos(k[ny] * y)
        return e

    def coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Sparse broadcastable coordinate arrays (X, Y, Z)."""
        a = self.axis
        return a[:, None, None], a[None, :, None], a[None, None, :]

    def radius(self) -> np.ndarray:
        X, Y, Z = self.coords()
        return np.sqrt(X * X + Y * Y + Z * Z)

    def node_position(self, index: Sequence[int]) -> tuple[float, float, float]:
        a = self.axis
        return (float(a[index[0]]), float(a[index[1]]), float(a[index[2]]))

    @property
    def k_max_sq(self) -> float:
        return 3.0 * float(np.max(self.wavenumbers**2))


class Field:
    """Immutable complex samples of a function on a Grid3."""

    __slots__ = ("grid", "values", "blown_up")

    def __init__(self, grid: Grid3, values, blown_up: bool = False, *, _adopt: bool = False):
        arr = np.asarray(values)
        if arr.ndim == 1:
            if arr.size != grid.size:
                raise ValueError(f"expected {grid.size} samples, got {arr.size}")
            arr = arr.reshape(grid.shape, order="F")
        if arr.shape != grid.shape:
            raise ValueError(f"expected shape {grid.shape}, got {arr.shape}")
        if _adopt and arr.dtype == np.complex128:
            data = arr
        else:
            data = np.array(arr, dtype=np.complex128, copy=True)
        if not blown_up and not np.isfinite(data).all():
            raise ValueError("field contains non-finite samples")
        data.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", data)
        object.__setattr__(self, "blown_up", bool(blown_up))

    def __setattr__(self, name, value):
        raise AttributeError("Field is immutable")

    @classmethod
    def adopt(cls, grid: Grid3, arr: np.ndarray) -> "Field":
        """Wrap an array without copying; the caller gives up ownership."""
        return cls(grid, arr, _adopt=True)

    @classmethod
    def zeros(cls, grid: Grid3) -> "Field":
        return cls.adopt(grid, np.zeros(grid.shape, dtype=np.complex128))

    def flat(self) -> np.ndarray:
        """Samples in the x-fastest flat layout."""
        return self.values.ravel(order="F")

    @property
    def real(self) -> np.ndarray:
        return self.values.real

    @property
    def imag(self) -> np.ndarray:
        return self.values.imag

    def abs2(self) -> np.ndarray:
        v = self.values
        return v.real * v.real + v.imag * v.imag

    def conj(self) -> "Field":
        return Field.adopt(self.grid, np.conj(self.values))

    def max_abs(self) -> float:
        return float(np.sqrt(self.abs2().max()))

    def _check(self, other: "Field") -> None:
        if self.grid != other.grid:
            raise GridMismatchError(f"{self.grid} vs {other.grid}")

    def __add__(self, other):
        if isinstance(other, Field):
            self._check(other)
            return Field.adopt(self.grid, self.values + other.values)
        return Field.adopt(self.grid, self.values + complex(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Field):
            self._check(other)
            return Field.adopt(self.grid, self.values - other.values)
        return Field.adopt(self.grid, self.values - complex(other))

    def __neg__(self):
        return Field.adopt(self.grid, -self.values)

    def __mul__(self, other):
        if isinstance(other, Field):
            self._check(other)
            return Field.adopt(self.grid, self.values * other.values)
        if isinstance(other, np.ndarray):
            return Field.adopt(self.grid, np.asarray(self.values * other, dtype=np.complex128))
        return Field.adopt(self.grid, self.values * complex(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Field(n={self.grid.n}, L={self.grid.L}, max|u|={self.max_abs():.6g})"


class SpectralWorkspace:
    """Wavenumber arrays and transform settings for one grid.

    Single owner: use one workspace per thread (see ``workspace_for``).
    """

    def __init__(self, grid: Grid3, workers: int = 1):
        self.grid = grid
        self.workers = workers
        k = grid.derivative_wavenumbers
        self.kx = k[:, None, None]
        self.ky = k[None, :, None]
        self.kz = k[None, None, :]
        self.k = (self.kx, self.ky, self.kz)
        kf = grid.wavenumbers
        self.k2 = kf[:, None, None] ** 2 + kf[None, :, None] ** 2 + kf[None, None, :] ** 2

    def forward(self, a: np.ndarray, overwrite: bool = False) -> np.ndarray:
        return sfft.fftn(a, workers=self.workers, overwrite_x=overwrite)

    def inverse(self, a: np.ndarray, overwrite: bool = False) -> np.ndarray:
        return sfft.ifftn(a, workers=self.workers, overwrite_x=overwrite)

    def gradient_arrays(self, a: np.ndarray, ahat: np.ndarray | None = None) -> list[np.ndarray]:
        if ahat is None:
            ahat = self.forward(a)
        return [self.inverse(1j * kj * ahat, overwrite=True) for kj in self.k]

    def laplacian_array(self, a: np.ndarray) -> np.ndarray:
        return self.inverse(-self.k2 * self.forward(a), overwrite=True)

    def spectral_sum(self, ahat: np.ndarray, weight: np.ndarray | None = None) -> float:
        """Physical-space quadrature of weight*|a|^2 computed from a's transform."""
        p = ahat.real**2 + ahat.imag**2
        if weight is not None:
            p = p * weight
        return float(p.sum()) * self.grid.dv / self.grid.size


_local = threading.local()


def workspace_for(grid: Grid3) -> SpectralWorkspace:
    """Per-thread cached workspace for ``grid``."""
    cache = getattr(_local, "cache", None)
    if cache is None:
        cache = _local.cache = {}
    ws = cache.get(grid)
    if ws is None:
        if len(cache) > 8:
            cache.clear()
        ws = cache[grid] = SpectralWorkspace(grid)
    return ws


def sample(grid: Grid3, f: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]) -> Field:
    """Evaluate a vectorized function f(X, Y, Z) at every node."""
    X, Y, Z = grid.coords()
    vals = np.broadcast_to(np.asarray(f(X, Y, Z), dtype=np.complex128), grid.shape)
    bad = ~np.isfinite(vals)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"non-finite sample at node {idx}, position {grid.node_position(idx)}")
    return Field(grid, vals)


def l2_norm_sq(u: Field) -> float:
    return float(u.abs2().sum()) * u.grid.dv


def l4_norm_4(u: Field) -> float:
    a2 = u.abs2()
    return float((a2 * a2).sum()) * u.grid.dv


def inner(u: Field, v: Field) -> complex:
    """<u, v> = integral of conj(u) v."""
    if u.grid != v.grid:
        raise GridMismatchError(f"{u.grid} vs {v.grid}")
    return complex(np.vdot(u.values, v.values)) * u.grid.dv


def gradient(u: Field, ws: SpectralWorkspace | None = None) -> tuple[Field, Field, Field]:
    ws = ws or workspace_for(u.grid)
    gx, gy, gz = ws.gradient_arrays(u.values)
    return Field.adopt(u.grid, gx), Field.adopt(u.grid, gy), Field.adopt(u.grid, gz)


def laplacian(u: Field, ws: SpectralWorkspace | None = None) -> Field:
    ws = ws or workspace_for(u.grid)
    return Field.adopt(u.grid, ws.laplacian_array(u.values))


def h1_seminorm_sq(u: Field, ws: SpectralWorkspace | None = None) -> float:
    """Integral of |grad u|^2, as a spectral sum of |k|^2 |u_hat|^2."""
    ws = ws or workspace_for(u.grid)
    return ws.spectral_sum(ws.forward(u.values), ws.k2)


def write_snapshot(path: str | Path, u: Field, t: float = 0.0, label: str = "") -> None:
    """JSON header line, then n^3 little-endian (re, im) float64 pairs."""
    header = {"n": u.grid.n, "L": u.grid.L, "t": float(t), "label": label}
    if u.grid.shift:
        header["shift"] = u.grid.shift
    flat = u.flat()
    pairs = np.empty((flat.size, 2), dtype="<f8")
    pairs[:, 0] = flat.real
    pairs[:, 1] = flat.imag
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(pairs.tobytes())


def read_snapshot(path: str | Path) -> tuple[Field, float, str]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        raw = fh.read()
    grid = Grid3(int(header["n"]), float(header["L"]), float(header.get("shift", 0.0)))
    pairs = np.frombuffer(raw, dtype="<f8")
    if pairs.size != 2 * grid.size:
        raise ValueError(f"snapshot {path}: expected {2 * grid.size} floats, found {pairs.size}")
    pairs = pairs.reshape(-1, 2)
    vals = pairs[:, 0] + 1j * pairs[:, 1]
    return Field(grid, vals), float(header["t"]), str(header.get("label", ""))
