"""Planck-law radiometry in wavenumber form and emissivity spectral libraries.

All wavenumbers are SI (m^-1). Spectral radiance is per unit wavenumber,
W sr^-1 m^-2 (m^-1)^-1; band radiance is the integral over a wavenumber band,
W sr^-1 m^-2.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, ExtrapolationError, OutOfBracketError, SpectralLibraryError


@dataclass(frozen=True)
class PhysicalConstants:
    h: float = 6.62607015e-34
    c: float = 2.99792458e8
    k_B: float = 1.380649e-23


CONSTANTS = PhysicalConstants()

# first and second radiation constants for the wavenumber form
C1 = 2.0 * CONSTANTS.h * CONSTANTS.c**2
C2 = CONSTANTS.h * CONSTANTS.c / CONSTANTS.k_B

T_BRACKET = (1.0, 5000.0)

CM1_TO_M1 = 100.0


class WavenumberGrid:
    """Strictly increasing, positive wavenumber samples (m^-1)."""

    __slots__ = ("_values",)

    def __init__(self, values):
        v = np.array(values, dtype=np.float64).ravel()
        if v.size < 2:
            raise DomainError(f"wavenumber grid needs at least 2 samples, got {v.size}")
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise DomainError("wavenumbers must be finite and > 0")
        if np.any(np.diff(v) <= 0):
            raise DomainError("wavenumber grid must be strictly increasing")
        v.setflags(write=False)
        self._values = v

    @classmethod
    def uniform(cls, lo, hi, count):
        return cls(np.linspace(lo, hi, int(count)))

    @classmethod
    def from_cm1(cls, values_cm1):
        return cls(np.asarray(values_cm1, dtype=np.float64) * CM1_TO_M1)

    @property
    def values(self):
        return self._values

    @property
    def cm1(self):
        return self._values / CM1_TO_M1

    def __len__(self):
        return self._values.size

    def __eq__(self, other):
        return isinstance(other, WavenumberGrid) and np.array_equal(self._values, other._values)

    def __hash__(self):
        return hash(self._values.tobytes())

    def __repr__(self):
        return f"WavenumberGrid({self._values[0]:g}..{self._values[-1]:g} m^-1, K={len(self)})"


@dataclass(frozen=True)
class SpectralCurve:
    material_id: str
    grid: WavenumberGrid
    emissivity: np.ndarray

    def __post_init__(self):
        e = np.array(self.emissivity, dtype=np.float64).ravel()
        if e.size != len(self.grid):
            raise SpectralLibraryError(
                f"{e.size} emissivity samples for a grid of {len(self.grid)}", material=self.material_id
            )
        if not np.all(np.isfinite(e)) or np.any(e < 0) or np.any(e > 1):
            raise SpectralLibraryError("emissivity outside [0, 1]", material=self.material_id)
        e.setflags(write=False)
        object.__setattr__(self, "emissivity", e)

    def at(self, nu):
        """Linearly interpolated emissivity at wavenumbers ``nu``; no extrapolation."""
        nu = np.asarray(nu, dtype=np.float64)
        lo, hi = self.grid.values[0], self.grid.values[-1]
        tol = 1e-9 * hi
        if np.any(nu < lo - tol) or np.any(nu > hi + tol):
            raise ExtrapolationError(
                f"material {self.material_id!r}: requested wavenumbers outside curve span [{lo:g}, {hi:g}] m^-1"
            )
        return np.interp(nu, self.grid.values, self.emissivity)


def _nu_array(grid):
    if isinstance(grid, WavenumberGrid):
        return grid.values
    return np.asarray(grid, dtype=np.float64)


def planck_radiance(nu, T):
    """Blackbody spectral radiance per unit wavenumber, ``2 h c^2 nu^3 / (exp(h c nu / k T) - 1)``."""
    nu = np.asarray(nu, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if np.any(nu <= 0):
        raise DomainError("wavenumber must be > 0")
    if np.any(T <= 0):
        raise DomainError("temperature must be > 0")
    with np.errstate(over="ignore"):
        out = C1 * nu**3 / np.expm1(C2 * nu / T)
    return out[()] if out.ndim == 0 else out


def planck_radiance_dT(nu, T):
    """Partial derivative of :func:`planck_radiance` with respect to temperature."""
    nu = np.asarray(nu, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    x = C2 * nu / T
    with np.errstate(over="ignore", invalid="ignore"):
        em = np.expm1(x)
        # exp(x) / expm1(x)^2 written to stay finite for large x
        out = C1 * nu**3 * (x / T) / em * (1.0 + 1.0 / em)
    out = np.where(np.isfinite(out), out, 0.0)
    return out[()] if out.ndim == 0 else out


def planck_inverse(nu, B):
    """Brightness temperature for spectral radiance ``B`` at wavenumber ``nu``."""
    nu = np.asarray(nu, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if np.any(nu <= 0):
        raise DomainError("wavenumber must be > 0")
    if np.any(B <= 0):
        raise DomainError("radiance must be > 0")
    out = C2 * nu / np.log1p(C1 * nu**3 / B)
    return out[()] if out.ndim == 0 else out


def band_radiance(T, grid):
    """Trapezoidal integral of the Planck curve over the grid's wavenumbers.

    ``T`` may be an array; the integral is taken per temperature. ``grid``
    may also be a raw array (a collapsed band integrates to zero).
    """
    nu = _nu_array(grid)
    T = np.asarray(T, dtype=np.float64)
    if np.any(T <= 0):
        raise DomainError("temperature must be > 0")
    spec = planck_radiance(nu, T[..., None])
    out = np.trapezoid(spec, nu, axis=-1)
    return out[()] if np.ndim(out) == 0 else out


def band_inverse(L, grid, tol=1e-6):
    """Temperature whose band radiance equals ``L``, by bisection on [1, 5000] K."""
    L = np.asarray(L, dtype=np.float64)
    if np.any(~np.isfinite(L)) or np.any(L <= 0):
        raise DomainError("band radiance must be finite and > 0")
    t_lo, t_hi = T_BRACKET
    l_lo, l_hi = band_radiance(np.array([t_lo, t_hi]), grid)
    if np.any(L < l_lo) or np.any(L > l_hi):
        raise OutOfBracketError(
            f"band radiance outside the [{t_lo:g}, {t_hi:g}] K bracket ({l_lo:.6g}..{l_hi:.6g})"
        )
    lo = np.full(L.shape, t_lo)
    hi = np.full(L.shape, t_hi)
    n_iter = int(np.ceil(np.log2((t_hi - t_lo) / tol))) + 2
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        above = band_radiance(mid, grid) > L
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    out = 0.5 * (lo + hi)
    return out[()] if out.ndim == 0 else out


def load_spectral_library(path):
    """Read a ``material,wavenumber_cm1,emissivity`` CSV into ``{material: SpectralCurve}``.

    Lines starting with ``#`` are skipped. Rows of one material may be split
    across the file; they are merged, must be ascending in wavenumber, and
    exact duplicates are dropped.
    """
    path = Path(path)
    rows = {}
    header_seen = False
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            fields = next(csv.reader([stripped]))
            fields = [f.strip() for f in fields]
            if not header_seen:
                if fields != ["material", "wavenumber_cm1", "emissivity"]:
                    raise SpectralLibraryError(f"bad header {fields!r}", line=lineno)
                header_seen = True
                continue
            if len(fields) != 3:
                raise SpectralLibraryError(f"expected 3 fields, got {len(fields)}", line=lineno)
            material = fields[0]
            if not material:
                raise SpectralLibraryError("empty material name", line=lineno)
            try:
                nu_cm1 = float(fields[1])
                e = float(fields[2])
            except ValueError:
                raise SpectralLibraryError(f"non-numeric value in {fields[1:]!r}", line=lineno) from None
            if not (np.isfinite(nu_cm1) and nu_cm1 > 0):
                raise SpectralLibraryError("wavenumber must be > 0", line=lineno, material=material)
            if not (np.isfinite(e) and 0.0 <= e <= 1.0):
                raise SpectralLibraryError(f"emissivity {e} outside [0, 1]", line=lineno, material=material)
            samples = rows.setdefault(material, [])
            if samples:
                last_nu, last_e, _ = samples[-1]
                if nu_cm1 == last_nu and e == last_e:
                    continue
                if nu_cm1 <= last_nu:
                    raise SpectralLibraryError("wavenumbers not strictly ascending", line=lineno, material=material)
            samples.append((nu_cm1, e, lineno))
    if not header_seen:
        raise SpectralLibraryError(f"{path}: empty spectral library", line=1)
    if not rows:
        raise SpectralLibraryError(f"{path}: no data rows")
    library = {}
    for material, samples in rows.items():
        if len(samples) < 2:
            raise SpectralLibraryError("needs at least 2 wavenumber samples", line=samples[0][2], material=material)
        nu = np.array([s[0] for s in samples]) * CM1_TO_M1
        e = np.array([s[1] for s in samples])
        library[material] = SpectralCurve(material, WavenumberGrid(nu), e)
    return library


def write_spectral_library(library, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write("material,wavenumber_cm1,emissivity\n")
        for material in sorted(library):
            curve = library[material]
            for nu, e in zip(curve.grid.cm1, curve.emissivity):
                fh.write(f"{material},{float(nu)!r},{float(e)!r}\n")


def band_average_emissivity(curve, band):
    """Mean of the linearly interpolated emissivity over the band's span.

    The trapezoid runs over the union of band samples and curve knots, so it
    is exact for the piecewise-linear interpolant.
    """
    nu = _nu_array(band)
    lo, hi = nu[0], nu[-1]
    if hi <= lo:
        return float(curve.at(lo))
    knots = curve.grid.values
    inner = knots[(knots > lo) & (knots < hi)]
    pts = np.union1d(nu, inner)
    e = curve.at(pts)
    mean = np.trapezoid(e, pts) / (hi - lo)
    return float(np.clip(mean, 0.0, 1.0))
