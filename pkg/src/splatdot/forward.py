"""Analytic time-domain forward model for photon diffusion in 2D.

Infinite-medium Green's functions generate baseline temporal point spread
functions (TPSFs), a Born linearization maps absorption perturbations to
TPSF perturbations through a dense sensitivity matrix assembled by adjoint
temporal convolution, and a photon-counting noise model corrupts clean
TPSFs at a prescribed effective level.

The infinite-medium kernel is used everywhere even though the domain is a
finite disc; this keeps the whole forward chain analytic. Synthetic
measurements are generated with the same Born model used for inversion (an
inverse-crime setup), so reconstruction accuracy figures describe the
optimizer, not model error.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.fft import irfft, next_fast_len, rfft

from .geometry import Grid, OptodeArray, TimeAxis

LIGHT_SPEED_CM_NS = 29.9792458


@dataclass(frozen=True)
class OpticalProperties:
    """Homogeneous background optical properties (cm^-1 units, index unitless)."""

    mu_a: float = 0.01
    mu_s_prime: float = 10.0
    refractive_index: float = 1.4

    def __post_init__(self):
        for name in ("mu_a", "mu_s_prime", "refractive_index"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"{name} must be positive and finite, got {v}")
        if self.mu_a / self.mu_s_prime > 0.1:
            warnings.warn(
                "diffusion approximation assumes mu_s' >> mu_a; "
                f"got mu_a/mu_s' = {self.mu_a / self.mu_s_prime:.3f}",
                stacklevel=2,
            )

    @property
    def diffusion_cm(self) -> float:
        """2D diffusion coefficient D = 1 / (2 mu_s')."""
        return 1.0 / (2.0 * self.mu_s_prime)

    @property
    def speed_cm_ns(self) -> float:
        """Speed of light in the medium."""
        return LIGHT_SPEED_CM_NS / self.refractive_index


@dataclass(frozen=True)
class TpsfSet:
    """Fluence-rate time series for every source-detector pair.

    ``values`` has shape (n_sources, n_detectors, n_bins).
    """

    values: np.ndarray
    optodes: OptodeArray | None = None
    time: TimeAxis | None = None

    @property
    def n_sources(self) -> int:
        return self.values.shape[0]

    @property
    def n_detectors(self) -> int:
        return self.values.shape[1]

    @property
    def n_bins(self) -> int:
        return self.values.shape[2]

    def flat(self) -> np.ndarray:
        """Values flattened in (source, detector, time) order."""
        return self.values.reshape(-1)


@dataclass(frozen=True)
class SensitivityMatrix:
    """Dense Born sensitivity matrix.

    Rows run over (source, detector, time-bin) with source outermost;
    columns follow the grid's active-pixel ordering. The pixel-area
    quadrature weight is folded into the entries, so a Born prediction is a
    plain matrix-vector product. Entries are non-positive: increasing
    absorption can only reduce fluence.
    """

    entries: np.ndarray  # (n_sources*n_detectors*n_bins, n_active)
    n_sources: int
    n_detectors: int
    n_bins: int
    n_active: int
    dt_ns: float
    resolution_cm: float
    radius_cm: float
    mu_a: float
    mu_s_prime: float
    refractive_index: float

    @property
    def n_rows(self) -> int:
        return self.n_sources * self.n_detectors * self.n_bins


def green2d(rho_cm, t_ns, props: OpticalProperties):
    """2D infinite-medium time-domain diffusion Green's function.

    G(rho, t) = exp(-rho^2 / (4 D v t) - mu_a v t) / (4 pi D v t) for t > 0,
    and 0 for t <= 0. Accepts scalars or broadcastable arrays.
    """
    rho = np.asarray(rho_cm, dtype=float)
    t = np.asarray(t_ns, dtype=float)
    if not (np.all(np.isfinite(rho)) and np.all(np.isfinite(t))):
        raise ValueError("rho and t must be finite")
    if np.any(rho < 0):
        raise ValueError("rho must be non-negative")
    d = props.diffusion_cm
    v = props.speed_cm_ns
    rho, t = np.broadcast_arrays(rho, t)
    out = np.zeros(t.shape, dtype=float)
    pos = t > 0
    tp = t[pos]
    dvt4 = 4.0 * d * v * tp
    out[pos] = np.exp(-rho[pos] ** 2 / dvt4 - props.mu_a * v * tp) / (np.pi * dvt4)
    if out.ndim == 0:
        return float(out)
    return out


def tpsf_peak_time(rho_cm: float, props: OpticalProperties) -> float:
    """Time at which the Green's function peaks for a given distance.

    Root of d(log G)/dt = 0: t* = (-1 + sqrt(1 + 4ab)) / (2b) with
    a = rho^2 / (4 D v) and b = mu_a v.
    """
    a = rho_cm**2 / (4.0 * props.diffusion_cm * props.speed_cm_ns)
    b = props.mu_a * props.speed_cm_ns
    return (-1.0 + np.sqrt(1.0 + 4.0 * a * b)) / (2.0 * b)


def baseline_tpsf(optodes: OptodeArray, props: OpticalProperties, time: TimeAxis) -> TpsfSet:
    """Homogeneous-medium TPSF for every source-detector pair."""
    dist = np.linalg.norm(
        optodes.sources[:, None, :] - optodes.detectors[None, :, :], axis=2
    )
    values = green2d(dist[:, :, None], time.bin_times[None, None, :], props)
    return TpsfSet(values=values, optodes=optodes, time=time)


def temporal_convolve(a: np.ndarray, b: np.ndarray, dt_ns: float) -> np.ndarray:
    """Causal discrete convolution with the bin-width quadrature weight.

    out[j] = dt * sum_{m=0}^{j} a[m] * b[j-m]. With samples at right-edge
    times (k + 1) * dt, out[j] is a rectangle-rule quadrature of the
    continuous convolution integral at time (j + 2) * dt.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"series must be 1D with equal length, got {a.shape} and {b.shape}")
    if dt_ns <= 0:
        raise ValueError(f"dt must be positive, got {dt_ns}")
    return np.convolve(a, b)[: a.size] * dt_ns


def build_jacobian(
    optodes: OptodeArray,
    grid: Grid,
    props: OpticalProperties,
    time: TimeAxis,
    dtype=np.float32,
    chunk_pixels: int = 96,
) -> SensitivityMatrix:
    """Assemble the Born sensitivity matrix by adjoint temporal convolution.

    The entry for (source s, detector d, bin j) and active pixel i is
    -v * [G(r_s, r_i, .) conv G(r_i, r_d, .)](t_j) * dx^2. Assembly is
    FFT-accelerated and runs per pixel chunk; each pixel's column is
    independent of the chunking, so results are identical for any chunk
    size. Entries are computed in double precision and stored as ``dtype``.
    """
    ns, nd, nt, ng = optodes.n_sources, optodes.n_detectors, time.n_bins, grid.n_active
    n_rows = ns * nd * nt
    dtype = np.dtype(dtype)
    try:
        entries = np.empty((n_rows, ng), dtype=dtype)
    except MemoryError as exc:
        raise MemoryError(
            f"sensitivity matrix needs {n_rows * ng * dtype.itemsize} bytes "
            f"({n_rows} rows x {ng} columns, {dtype.name})"
        ) from exc

    d = props.diffusion_cm
    v = props.speed_cm_ns
    t = time.bin_times
    # G(rho, t) = amp(t) * exp(-rho^2 * decay(t)); precompute the t-only parts.
    amp = np.exp(-props.mu_a * v * t) / (4.0 * np.pi * d * v * t)
    decay = 1.0 / (4.0 * d * v * t)
    nfft = next_fast_len(2 * nt - 1)
    scale = -v * time.dt_ns * grid.resolution_cm**2

    for lo in range(0, ng, chunk_pixels):
        hi = min(lo + chunk_pixels, ng)
        px = grid.active_xy[lo:hi]
        rho_s = np.linalg.norm(optodes.sources[:, None, :] - px[None, :, :], axis=2)
        rho_d = np.linalg.norm(optodes.detectors[:, None, :] - px[None, :, :], axis=2)
        gs = amp * np.exp(-rho_s[:, :, None] ** 2 * decay)  # (ns, P, nt)
        gd = amp * np.exp(-rho_d[:, :, None] ** 2 * decay)  # (nd, P, nt)
        fs = rfft(gs, nfft, axis=-1)
        fd = rfft(gd, nfft, axis=-1)
        conv = irfft(fs[:, None, :, :] * fd[None, :, :, :], nfft, axis=-1)[..., :nt]
        # Convolution of non-negative series; clamp FFT round-off noise so
        # the stored entries are exactly non-positive after negation.
        np.maximum(conv, 0.0, out=conv)
        block = np.moveaxis(scale * conv, 2, 3)
        entries[:, lo:hi] = block.reshape(n_rows, hi - lo).astype(dtype)

    return SensitivityMatrix(
        entries=entries,
        n_sources=ns,
        n_detectors=nd,
        n_bins=nt,
        n_active=ng,
        dt_ns=time.dt_ns,
        resolution_cm=grid.resolution_cm,
        radius_cm=float(np.max(np.linalg.norm(optodes.sources, axis=1))),
        mu_a=props.mu_a,
        mu_s_prime=props.mu_s_prime,
        refractive_index=props.refractive_index,
    )


def born_forward(J: SensitivityMatrix, dmu: np.ndarray, baseline: TpsfSet) -> TpsfSet:
    """Born prediction: baseline plus the linear response to ``dmu``.

    ``dmu`` is the absorption perturbation on the active pixels (cm^-1).
    The matrix product runs in the Jacobian's storage precision.
    """
    dmu = np.asarray(dmu, dtype=float)
    if dmu.shape != (J.n_active,):
        raise ValueError(f"dmu has shape {dmu.shape}, expected ({J.n_active},)")
    delta = J.entries @ dmu.astype(J.entries.dtype)
    values = baseline.values + delta.astype(float).reshape(
        J.n_sources, J.n_detectors, J.n_bins
    )
    return TpsfSet(values=values, optodes=baseline.optodes, time=baseline.time)


def apply_noise(clean: TpsfSet, target_level: float = 0.02, seed: int = 0) -> TpsfSet:
    """Poisson photon-counting noise at a prescribed effective level.

    Per source-detector pair the clean TPSF is scaled to mean photon counts
    with a total budget N_ph solved from (N_ph * f_peak)^(-1/2) =
    ``target_level``, where f_peak is the peak bin's fraction of total
    counts; independent Poisson counts are drawn per bin and rescaled so
    the pair's total matches the clean total. Deterministic given ``seed``.
    """
    values = clean.values
    if np.any(values < 0):
        raise ValueError("clean TPSF values must be non-negative")
    if not (0 < target_level < 1):
        raise ValueError(f"target noise level must lie in (0, 1), got {target_level}")
    rng = np.random.default_rng(seed)
    totals = values.sum(axis=2)
    peaks = values.max(axis=2)
    ok = totals > 0
    f_peak = np.where(ok, peaks / np.where(ok, totals, 1.0), 1.0)
    n_ph = 1.0 / (target_level**2 * f_peak)
    lam = np.where(ok, n_ph / np.where(ok, totals, 1.0), 0.0)[:, :, None] * values
    counts = rng.poisson(lam).astype(float)
    count_totals = counts.sum(axis=2)
    drawn = count_totals > 0
    rescale = np.where(drawn, totals / np.where(drawn, count_totals, 1.0), 0.0)
    noisy = counts * rescale[:, :, None]
    return TpsfSet(values=noisy, optodes=clean.optodes, time=clean.time)
