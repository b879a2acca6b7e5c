"""Temperature / emissivity / texture (TeX) decomposition of thermal signals.

Two routes:

* spectral: a multi-band radiance cube plus a per-material emissivity
  spectrum. The reflected term is eliminated by differentiating along
  wavenumber, which leaves an equation in temperature alone; the
  illumination factor and texture follow once temperature is known.
* pseudo: a single-band camera. Temperature comes from removing the
  reflected ambient radiance and inverting the band-integrated Planck law;
  texture is an AGC-like contrast stretch plus unsharp mask.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import (
    DegenerateEmissivityError,
    DimensionMismatchError,
    DomainError,
    EmissivityCeilingError,
    MissingMaterialError,
    NegativeEmissionError,
    NoSolutionError,
    ValidationError,
)
from .radiometry import (
    T_BRACKET,
    WavenumberGrid,
    band_inverse,
    band_radiance,
    planck_inverse,
    planck_radiance,
    planck_radiance_dT,
)

log = logging.getLogger(__name__)

MODES = ("exact", "paper_verbatim")
REFLECTIONS = ("ambient", "flat")

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
_SCAN_POINTS = 256


@dataclass
class ThermalCube:
    grid: WavenumberGrid
    radiance: np.ndarray  # (H, W, K)

    def __post_init__(self):
        self.radiance = np.asarray(self.radiance, dtype=np.float64)
        if self.radiance.ndim != 3 or self.radiance.shape[2] != len(self.grid):
            raise DimensionMismatchError(
                f"radiance shape {self.radiance.shape} does not match K={len(self.grid)} bands"
            )
        if np.any(self.radiance < 0):
            raise ValidationError("radiance must be >= 0")

    @property
    def height(self):
        return self.radiance.shape[0]

    @property
    def width(self):
        return self.radiance.shape[1]


@dataclass
class MaterialMask:
    labels: np.ndarray  # (H, W) integer indices into legend
    legend: dict  # index -> material id

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise DimensionMismatchError("material labels must be 2-D")
        self.legend = {int(k): str(v) for k, v in self.legend.items()}
        missing = set(np.unique(self.labels).tolist()) - set(self.legend)
        if missing:
            raise ValidationError(f"label indices {sorted(missing)} not in legend")

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]

    def material_names(self):
        """Per-pixel material id strings."""
        names = np.empty(self.labels.shape, dtype=object)
        for idx, name in self.legend.items():
            names[self.labels == idx] = name
        return names


@dataclass
class TeXImage:
    T: np.ndarray
    material: MaterialMask
    X: np.ndarray
    v0: np.ndarray
    nan_count: int = 0
    clamped_count: int = 0

    @property
    def height(self):
        return self.T.shape[0]

    @property
    def width(self):
        return self.T.shape[1]


@dataclass
class DecompositionConfig:
    """Settings for both decomposition routes.

    ``reflection`` selects which reflected-radiance component is assumed flat
    across the band in exact mode: ``"ambient"`` takes the illumination
    factor as wavenumber-independent (reflected radiance shaped like the
    reference blackbody), ``"flat"`` takes the reflected radiance itself as
    wavenumber-independent.
    """

    t_ref: float = 295.0
    eps_e: float = 0.01
    mode: str = "exact"
    t_ambient: float = 295.0
    reflection: str = "ambient"
    clamp_v0: bool = True

    def __post_init__(self):
        if not 0.0 < self.eps_e < 0.5:
            raise ValidationError(f"eps_e must be in (0, 0.5), got {self.eps_e}")
        if self.t_ref <= 0 or self.t_ambient <= 0:
            raise ValidationError("t_ref and t_ambient must be > 0")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.reflection not in REFLECTIONS:
            raise ValidationError(f"reflection must be one of {REFLECTIONS}, got {self.reflection!r}")


def _central_diff(y, nu):
    """d/dnu on interior points, shape (..., K-2)."""
    return (y[..., 2:] - y[..., :-2]) / (nu[2:] - nu[:-2])


def _check_emissivity(e, cfg):
    if np.any(e >= 1.0 - cfg.eps_e):
        raise EmissivityCeilingError(f"emissivity {np.max(e):.6g} reaches the ceiling 1 - eps_e = {1 - cfg.eps_e:g}")


def _derivative_terms(S, e, nu, cfg, reflection):
    """Differentiated normalized signal and emissivity ratio."""
    if reflection == "ambient":
        R = planck_radiance(nu, cfg.t_ref)
    else:
        R = np.ones_like(nu)
    f = S / ((1.0 - e) * R)
    g = e / ((1.0 - e) * R)
    return _central_diff(f, nu), g


def _exact_batch(S, e, nu, cfg):
    """Vectorized exact-mode solve: rows of S are pixels sharing emissivity ``e``.

    Minimizes ``sum_k (D f - D(g B(T)))^2`` per pixel with a log-spaced scan to
    bracket the minimum, golden section inside the bracket, then bisection on
    the sign of the analytic derivative. Returns (T, ok).
    """
    df, g = _derivative_terms(S, e, nu, cfg, cfg.reflection)
    n_pix = S.shape[0]

    def residual(T):
        gb = g * planck_radiance(nu, T[:, None])
        return df - _central_diff(gb, nu)

    def objective(T):
        r = residual(T)
        return np.sum(r * r, axis=-1)

    def slope(T):
        r = residual(T)
        dgb = _central_diff(g * planck_radiance_dT(nu, T[:, None]), nu)
        return -2.0 * np.sum(r * dgb, axis=-1)

    t_lo, t_hi = T_BRACKET
    scan = np.geomspace(t_lo, t_hi, _SCAN_POINTS)
    gb_scan = g * planck_radiance(nu, scan[:, None])  # (P, K)
    d_scan = _central_diff(gb_scan, nu)  # (P, K-2)
    r = df[:, None, :] - d_scan[None, :, :]
    phi = np.sum(r * r, axis=-1)  # (N, P)
    best = np.argmin(phi, axis=1)
    a = scan[np.maximum(best - 1, 0)]
    b = scan[np.minimum(best + 1, _SCAN_POINTS - 1)]

    # golden section
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = objective(c), objective(d)
    for _ in range(60):
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = b - _GOLDEN * (b - a)
        new_d = a + _GOLDEN * (b - a)
        c_next = np.where(left, new_c, d)
        d_next = np.where(left, c, new_d)
        fc_next = np.where(left, objective(new_c), fd)
        fd_next = np.where(left, fc, objective(new_d))
        c, d, fc, fd = c_next, d_next, fc_next, fd_next

    # widen slightly and refine on the derivative sign
    width = np.maximum(b - a, 1e-9)
    lo = np.maximum(a - width, t_lo)
    hi = np.minimum(b + width, t_hi)
    s_lo, s_hi = slope(lo), slope(hi)
    signchange = (s_lo <= 0) & (s_hi >= 0)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        s_mid = slope(mid)
        go_right = s_mid < 0
        lo = np.where(signchange & go_right, mid, lo)
        hi = np.where(signchange & ~go_right, mid, hi)
    T = np.where(signchange, 0.5 * (lo + hi), 0.5 * (a + b))
    ok = np.isfinite(T) & (T > t_lo * (1 + 1e-9)) & (T < t_hi * (1 - 1e-9))
    if n_pix and not np.all(ok):
        log.debug("exact solve: %d of %d pixels hit the bracket edge", int(np.sum(~ok)), n_pix)
    return T, ok


def _verbatim_batch(S, e, nu, cfg):
    """Per-point ``B = f'/g'`` with f = S/(1-e), g = e/(1-e); median of inversions."""
    df, g = _derivative_terms(S, e, nu, cfg, "flat")
    dg = _central_diff(g, nu)
    nu_in = nu[1:-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        b_hat = df / dg
    valid = np.isfinite(b_hat) & (b_hat > 0) & (dg != 0)
    safe = np.where(valid, b_hat, 1.0)
    t_pts = np.where(valid, planck_inverse(nu_in, safe), np.nan)
    ok = np.any(valid, axis=-1)
    with np.errstate(all="ignore"):
        T = np.where(ok, np.nanmedian(np.where(ok[:, None], t_pts, 0.0), axis=-1), np.nan)
    return T, ok


def _solve_batch(S, e, grid, cfg):
    nu = grid.values
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    e = np.asarray(e, dtype=np.float64)
    if len(grid) < 3:
        raise ValidationError("spectral temperature solve needs K >= 3 bands")
    if S.shape[-1] != len(grid) or e.shape[-1] != len(grid):
        raise DimensionMismatchError("radiance / emissivity length does not match the grid")
    _check_emissivity(e, cfg)
    ratio = e / (1.0 - e)
    d_ratio = _central_diff(ratio, nu)
    scale = np.max(np.abs(ratio)) / (nu[-1] - nu[0])
    if np.max(np.abs(d_ratio)) < 1e-12 * max(scale, np.finfo(float).tiny):
        raise DegenerateEmissivityError("emissivity is constant across the band; derivative carries no temperature")
    if cfg.mode == "exact":
        return _exact_batch(S, e, nu, cfg)
    return _verbatim_batch(S, e, nu, cfg)


def solve_temperature_spectral(S, e, grid, cfg=None):
    """Temperature of one pixel from its K radiance samples and emissivity spectrum."""
    cfg = cfg or DecompositionConfig()
    T, ok = _solve_batch(np.asarray(S, dtype=np.float64)[None, :], e, grid, cfg)
    if not ok[0]:
        raise NoSolutionError("temperature residual has no minimum inside [1, 5000] K")
    return float(T[0])


def illumination_factor(S, e, T, nu, cfg=None):
    """``V0 = (S - e B(T)) / ((1 - e) B(T0))``; broadcasts over arrays."""
    cfg = cfg or DecompositionConfig()
    e = np.asarray(e, dtype=np.float64)
    _check_emissivity(e, cfg)
    if np.any(np.asarray(T) <= 0):
        raise DomainError("temperature must be > 0")
    S = np.asarray(S, dtype=np.float64)
    out = (S - e * planck_radiance(nu, T)) / ((1.0 - e) * planck_radiance(nu, cfg.t_ref))
    return out[()] if np.ndim(out) == 0 else out


def texture_integral(v0, t0, grid):
    """Band texture ``X = integral of V0(nu) B(nu, T0) dnu`` by the trapezoid rule."""
    nu = grid.values if isinstance(grid, WavenumberGrid) else np.asarray(grid, dtype=np.float64)
    v0 = np.asarray(v0, dtype=np.float64)
    out = np.trapezoid(v0 * planck_radiance(nu, t0), nu, axis=-1)
    return out[()] if np.ndim(out) == 0 else out


def decompose_cube(cube, mask, library, cfg=None):
    """Per-pixel TeX decomposition of a radiance cube.

    Pixels whose material cannot be solved (emissivity at the ceiling,
    degenerate spectrum, no minimum) come back as NaN and are counted.
    """
    cfg = cfg or DecompositionConfig()
    if (mask.height, mask.width) != (cube.height, cube.width):
        raise DimensionMismatchError(
            f"mask is {mask.height}x{mask.width}, cube is {cube.height}x{cube.width}"
        )
    used = sorted(set(np.unique(mask.labels).tolist()))
    missing = [mask.legend[i] for i in used if mask.legend[i] not in library]
    if missing:
        raise MissingMaterialError(f"materials not in the spectral library: {missing}")

    nu = cube.grid.values
    H, W, K = cube.radiance.shape
    T = np.full((H, W), np.nan)
    X = np.full((H, W), np.nan)
    v0_map = np.full((H, W), np.nan)
    clamped = 0
    for idx in used:
        name = mask.legend[idx]
        sel = mask.labels == idx
        S = cube.radiance[sel]  # (n, K)
        e = library[name].at(nu)
        try:
            t_pix, ok = _solve_batch(S, e, cube.grid, cfg)
        except (EmissivityCeilingError, DegenerateEmissivityError) as exc:
            log.warning("material %r: %s; %d pixels set to NaN", name, exc, int(sel.sum()))
            continue
        t_pix = np.where(ok, t_pix, np.nan)
        good = np.isfinite(t_pix)
        v0 = np.full(S.shape, np.nan)
        if np.any(good):
            v0[good] = illumination_factor(S[good], e, t_pix[good, None], nu, cfg)
        if cfg.clamp_v0:
            neg = v0 < 0
            clamped += int(np.sum(np.any(neg, axis=-1)))
            v0 = np.where(neg, 0.0, v0)
        x_pix = texture_integral(v0, cfg.t_ref, cube.grid)
        T[sel] = t_pix
        X[sel] = x_pix
        v0_map[sel] = np.mean(v0, axis=-1)
    nan_count = int(np.sum(~np.isfinite(T)))
    if nan_count:
        log.info("decompose_cube: %d of %d pixels unsolved", nan_count, H * W)
    return TeXImage(T=T, material=mask, X=X, v0=v0_map, nan_count=nan_count, clamped_count=clamped)


def solve_temperature_pseudo(S_band, e_band, grid, cfg=None):
    """Single-band blackbody correction.

    Models ``S = e L(T) + (1 - e) L(T_ambient)`` with ``L`` the band radiance
    and returns ``T = L^-1((S - (1 - e) L(T_ambient)) / e)``.
    """
    cfg = cfg or DecompositionConfig()
    S_band = np.asarray(S_band, dtype=np.float64)
    e_band = np.asarray(e_band, dtype=np.float64)
    if np.any(e_band <= 0) or np.any(e_band > 1):
        raise DomainError("band emissivity must be in (0, 1]")
    reflected = (1.0 - e_band) * band_radiance(cfg.t_ambient, grid)
    emitted = S_band - reflected
    if np.any(emitted <= 0):
        raise NegativeEmissionError("signal is below the reflected ambient radiance; emitted part would be <= 0")
    return band_inverse(emitted / e_band, grid)


def _gaussian_kernel(sigma, size):
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def extract_texture_pseudo(image, sigma=1.5, size=7, amount=0.5, percentiles=(2.0, 98.0)):
    """AGC-style texture: percentile stretch to [0, 1], then unsharp mask.

    Borders are handled by half-sample symmetric reflection. A flat image
    (2nd and 98th percentiles equal) maps to 0.5 everywhere.
    """
    img = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise DomainError("texture extraction needs a finite image")
    p_lo, p_hi = np.percentile(img, percentiles)
    if p_hi <= p_lo:
        return np.full(img.shape, 0.5)
    stretched = np.clip((img - p_lo) / (p_hi - p_lo), 0.0, 1.0)
    k = _gaussian_kernel(sigma, size)
    blur = ndimage.correlate1d(stretched, k, axis=0, mode="reflect")
    blur = ndimage.correlate1d(blur, k, axis=1, mode="reflect")
    return np.clip(stretched + amount * (stretched - blur), 0.0, 1.0)
