"""Synthetic ground-truth absorption maps.

Four benchmark cases are built from discs: a single inclusion, three
circles, a crescent (disc minus an offset disc) and a donut (annulus).
Fields are binary: the contrast value inside the shape set, zero outside.
The benchmark geometry below is an artifact default; every number is
overridable through the run configuration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Domain, Grid

CASES = ("one-inclusion", "three-circles", "crescent", "donut")

# Splat budget per case; the extremes (1 and 16) bracket the benchmark.
DEFAULT_SPLAT_COUNT = {
    "one-inclusion": 1,
    "three-circles": 3,
    "crescent": 8,
    "donut": 16,
}


@dataclass(frozen=True)
class Disc:
    cx: float
    cy: float
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"disc radius must be positive, got {self.radius}")

    def contains(self, xy: np.ndarray) -> np.ndarray:
        return (xy[:, 0] - self.cx) ** 2 + (xy[:, 1] - self.cy) ** 2 <= self.radius**2


@dataclass(frozen=True)
class PhantomSpec:
    """A union of discs minus a union of discs, at a fixed contrast."""

    case: str
    include: tuple[Disc, ...]
    exclude: tuple[Disc, ...] = ()
    contrast: float = 0.02

    def __post_init__(self):
        if self.contrast <= 0:
            raise ValueError(f"contrast must be positive, got {self.contrast}")
        if not self.include:
            raise ValueError("phantom needs at least one positive disc")


def one_inclusion(center=(1.0, 0.5), radius=0.6, contrast=0.02) -> PhantomSpec:
    return PhantomSpec(
        case="one-inclusion",
        include=(Disc(center[0], center[1], radius),),
        contrast=contrast,
    )


def three_circles(ring_radius=1.5, radius=0.5, start_angle_deg=90.0, contrast=0.02) -> PhantomSpec:
    angles = np.deg2rad(start_angle_deg) + 2.0 * np.pi * np.arange(3) / 3.0
    discs = tuple(
        Disc(ring_radius * np.cos(a), ring_radius * np.sin(a), radius) for a in angles
    )
    return PhantomSpec(case="three-circles", include=discs, contrast=contrast)


def crescent(
    center=(-0.8, 0.0), radius=1.0,
    notch_center=(-0.4, 0.0), notch_radius=0.8, contrast=0.02,
) -> PhantomSpec:
    return PhantomSpec(
        case="crescent",
        include=(Disc(center[0], center[1], radius),),
        exclude=(Disc(notch_center[0], notch_center[1], notch_radius),),
        contrast=contrast,
    )


def donut(center=(0.8, -0.6), outer_radius=1.1, inner_radius=0.55, contrast=0.02) -> PhantomSpec:
    if inner_radius >= outer_radius:
        raise ValueError("donut inner radius must be smaller than the outer radius")
    return PhantomSpec(
        case="donut",
        include=(Disc(center[0], center[1], outer_radius),),
        exclude=(Disc(center[0], center[1], inner_radius),),
        contrast=contrast,
    )


def default_phantom(case: str, **overrides) -> PhantomSpec:
    factories = {
        "one-inclusion": one_inclusion,
        "three-circles": three_circles,
        "crescent": crescent,
        "donut": donut,
    }
    if case not in factories:
        raise ValueError(f"unknown phantom case {case!r}; expected one of {CASES}")
    return factories[case](**overrides)


def make_phantom(spec: PhantomSpec, grid: Grid, domain: Domain | None = None) -> np.ndarray:
    """Rasterize the phantom to a binary contrast field on the active pixels.

    Positive discs must lie entirely inside the domain; when no domain is
    given it is inferred from the raster extent.
    """
    if domain is None:
        radius = grid.width * grid.resolution_cm / 2.0
        center = (float(grid.xs[0] + radius - grid.resolution_cm / 2.0),
                  float(grid.ys[0] + radius - grid.resolution_cm / 2.0))
        domain = Domain(radius_cm=radius, center=center)
    for disc in spec.include:
        reach = np.hypot(disc.cx - domain.center[0], disc.cy - domain.center[1]) + disc.radius
        if reach > domain.radius_cm + 1e-12:
            raise ValueError(
                f"{spec.case}: disc at ({disc.cx}, {disc.cy}) r={disc.radius} "
                f"leaves the domain (reach {reach:.3f} > {domain.radius_cm})"
            )
    xy = grid.active_xy
    inside = np.zeros(grid.n_active, dtype=bool)
    for disc in spec.include:
        inside |= disc.contains(xy)
    for disc in spec.exclude:
        inside &= ~disc.contains(xy)
    return np.where(inside, spec.contrast, 0.0)
