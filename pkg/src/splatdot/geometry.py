"""Imaging geometry: circular domain, pixel raster, optode ring and time axis.

All lengths are in cm, all times in ns. The domain is a disc; the pixel
raster covers its bounding square and carries an active mask selecting the
pixels whose centers fall inside the disc. Sources and detectors sit on the
boundary circle, detectors rotated by half an angular step so the two rings
interleave.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Domain:
    """Circular imaging domain of radius ``radius_cm`` centered at ``center``."""

    radius_cm: float = 3.0
    center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not np.isfinite(self.radius_cm) or self.radius_cm <= 0:
            raise ValueError(f"domain radius must be positive, got {self.radius_cm}")


@dataclass(frozen=True)
class Grid:
    """Square pixel raster over a domain's bounding square.

    ``active_mask`` is a (height, width) boolean array; ``active_indices``
    are the flat raster indices (row-major, y outer) of the active pixels in
    strictly increasing order. ``active_xy`` holds the physical centers of
    the active pixels, one row per active pixel, in the same order.
    """

    resolution_cm: float
    width: int
    height: int
    xs: np.ndarray            # (width,) pixel-center x coordinates
    ys: np.ndarray            # (height,) pixel-center y coordinates
    active_mask: np.ndarray   # (height, width) bool
    active_indices: np.ndarray  # (n_active,) flat raster indices
    active_xy: np.ndarray     # (n_active, 2) centers of active pixels
    margin_cm: float = 0.0

    @property
    def n_active(self) -> int:
        return int(self.active_indices.size)

    @property
    def pixel_centers(self) -> np.ndarray:
        """Centers of every raster pixel, shape (height*width, 2), row-major."""
        gx, gy = np.meshgrid(self.xs, self.ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    def to_raster(self, values: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """Scatter per-active-pixel values onto the full (height, width) raster."""
        values = np.asarray(values, dtype=float)
        if values.shape != (self.n_active,):
            raise ValueError(
                f"expected {self.n_active} active-pixel values, got shape {values.shape}"
            )
        img = np.full(self.height * self.width, fill, dtype=float)
        img[self.active_indices] = values
        return img.reshape(self.height, self.width)

    def from_raster(self, image: np.ndarray) -> np.ndarray:
        """Gather the active-pixel values from a full raster image."""
        image = np.asarray(image, dtype=float)
        if image.shape != (self.height, self.width):
            raise ValueError(f"raster shape {image.shape} != {(self.height, self.width)}")
        return image.ravel()[self.active_indices]

    def nearest_active_index(self, point) -> int:
        """Index (into the active-pixel ordering) of the pixel nearest to ``point``."""
        p = np.asarray(point, dtype=float)
        d2 = np.sum((self.active_xy - p) ** 2, axis=1)
        return int(np.argmin(d2))


@dataclass(frozen=True)
class OptodeArray:
    """Source and detector positions on the domain boundary, shape (n, 2) each."""

    sources: np.ndarray
    detectors: np.ndarray

    @property
    def n_sources(self) -> int:
        return int(self.sources.shape[0])

    @property
    def n_detectors(self) -> int:
        return int(self.detectors.shape[0])


@dataclass(frozen=True)
class TimeAxis:
    """Uniform time binning; samples sit at bin right-edges (j + 1) * dt.

    The first sample is at dt, not 0, so the diffusion kernel (singular at
    t = 0) is evaluated only at strictly positive times.
    """

    t_total_ns: float
    dt_ns: float
    n_bins: int
    bin_times: np.ndarray  # (n_bins,)


def build_grid(domain: Domain, resolution_cm: float, margin_cm: float = 0.0) -> Grid:
    """Rasterize the domain's bounding square into square pixels.

    A pixel is active iff its center lies within ``radius - margin`` of the
    domain center. The raster spans the bounding square with cell-centered
    pixels, ``round(diameter / resolution)`` per side.
    """
    if not np.isfinite(resolution_cm) or resolution_cm <= 0:
        raise ValueError(f"resolution must be positive, got {resolution_cm}")
    if margin_cm < 0 or margin_cm >= domain.radius_cm:
        raise ValueError(f"margin must lie in [0, radius), got {margin_cm}")
    n = int(round(2.0 * domain.radius_cm / resolution_cm))
    if n < 2:
        raise ValueError(
            f"resolution {resolution_cm} gives {n} pixels across the domain; need >= 2"
        )
    cx, cy = domain.center
    half = n * resolution_cm / 2.0
    xs = cx - half + (np.arange(n) + 0.5) * resolution_cm
    ys = cy - half + (np.arange(n) + 0.5) * resolution_cm
    gx, gy = np.meshgrid(xs, ys)
    r2 = (gx - cx) ** 2 + (gy - cy) ** 2
    active_mask = r2 <= (domain.radius_cm - margin_cm) ** 2
    active_indices = np.flatnonzero(active_mask.ravel())
    active_xy = np.stack([gx.ravel()[active_indices], gy.ravel()[active_indices]], axis=1)
    return Grid(
        resolution_cm=float(resolution_cm),
        width=n,
        height=n,
        xs=_frozen(xs),
        ys=_frozen(ys),
        active_mask=_frozen(active_mask),
        active_indices=_frozen(active_indices),
        active_xy=_frozen(active_xy),
        margin_cm=float(margin_cm),
    )


def place_optodes(n_src: int, n_det: int, domain: Domain) -> OptodeArray:
    """Place optodes uniformly on the boundary circle.

    Sources sit at angles 2*pi*k/n_src; detectors are rotated by half a
    detector step (pi/n_det) so the rings interleave and no detector
    coincides with a source.
    """
    if n_src < 1 or n_det < 1:
        raise ValueError(f"optode counts must be >= 1, got {n_src} sources, {n_det} detectors")
    cx, cy = domain.center
    r = domain.radius_cm

    def ring(n: int, offset: float) -> np.ndarray:
        ang = 2.0 * np.pi * np.arange(n) / n + offset
        return np.stack([cx + r * np.cos(ang), cy + r * np.sin(ang)], axis=1)

    return OptodeArray(
        sources=_frozen(ring(n_src, 0.0)),
        detectors=_frozen(ring(n_det, np.pi / n_det)),
    )


def time_axis(t_total_ns: float, dt_ns: float) -> TimeAxis:
    """Build the measurement time axis with samples at (j + 1) * dt."""
    if not np.isfinite(dt_ns) or dt_ns <= 0:
        raise ValueError(f"dt must be positive, got {dt_ns}")
    if dt_ns > t_total_ns:
        raise ValueError(f"dt {dt_ns} exceeds total window {t_total_ns}")
    n_bins = int(round(t_total_ns / dt_ns))
    bin_times = (np.arange(n_bins) + 1) * dt_ns
    return TimeAxis(
        t_total_ns=float(t_total_ns),
        dt_ns=float(dt_ns),
        n_bins=n_bins,
        bin_times=_frozen(bin_times),
    )
