"""Gaussian-splat absorption fields.

An absorption perturbation is a sum of K anisotropic 2D Gaussians, each
with a peak amplitude, a center, two axis scales and an orientation. The
amplitude and scales are optimized as logs so they stay positive; the
flattened unconstrained vector per splat is

    (log_amplitude, x, y, log_scale_x, log_scale_y, angle)

and splats are concatenated into a length-6K vector. Rasterization onto
the grid is truncated to a bounding box of the n_sigma ellipse per splat,
which keeps the touched pixel count far below the grid size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Grid

PARAMS_PER_SPLAT = 6


def _theta_of(params) -> np.ndarray:
    theta = np.asarray(getattr(params, "theta", params), dtype=float)
    if theta.ndim != 1 or theta.size % PARAMS_PER_SPLAT != 0:
        raise ValueError(
            f"parameter vector length must be a multiple of {PARAMS_PER_SPLAT}, "
            f"got shape {theta.shape}"
        )
    return theta


@dataclass(frozen=True)
class SplatParams:
    """Flattened unconstrained parameter vector for K splats."""

    theta: np.ndarray

    def __post_init__(self):
        theta = _theta_of(self.theta)
        if not np.all(np.isfinite(theta)):
            raise ValueError("splat parameters must be finite")
        object.__setattr__(self, "theta", theta)

    @property
    def n_splats(self) -> int:
        return self.theta.size // PARAMS_PER_SPLAT


@dataclass(frozen=True)
class DecodedSplats:
    """Physical per-splat parameters after undoing the log reparametrization."""

    amplitude: np.ndarray  # (K,) peak absorption contrast, cm^-1
    centers: np.ndarray    # (K, 2) cm
    scale_x: np.ndarray    # (K,) cm
    scale_y: np.ndarray    # (K,) cm
    angle: np.ndarray      # (K,) radians in (-pi/2, pi/2]

    @property
    def n_splats(self) -> int:
        return self.amplitude.size


@dataclass(frozen=True)
class SplatFieldEval:
    """Rasterized field on the active pixels plus each splat's support."""

    field: np.ndarray           # (n_active,)
    supports: list[np.ndarray]  # per splat, indices into the active ordering


@dataclass(frozen=True)
class FieldGradients:
    """Per-splat partials of the field w.r.t. the unconstrained parameters.

    ``blocks[k]`` has shape (len(supports[k]), 6) with columns ordered as
    the parameter vector. Column 0 equals the splat's own field values, so
    a field evaluation comes for free with the gradients.
    """

    supports: list[np.ndarray]
    blocks: list[np.ndarray]

    def field(self, n_active: int) -> np.ndarray:
        out = np.zeros(n_active)
        for idx, block in zip(self.supports, self.blocks):
            np.add.at(out, idx, block[:, 0])
        return out

    def chain(self, pixel_weights: np.ndarray) -> np.ndarray:
        """Contract d(field)/d(theta) with per-pixel weights -> (6K,) gradient."""
        grads = [block.T @ pixel_weights[idx] for idx, block in zip(self.supports, self.blocks)]
        if not grads:
            return np.zeros(0)
        return np.concatenate(grads)


def wrap_angle(angle):
    """Wrap orientation angles into (-pi/2, pi/2]; an ellipse has period pi."""
    a = np.mod(np.asarray(angle, dtype=float), np.pi)
    return np.where(a > np.pi / 2, a - np.pi, a)


def decode_params(params) -> DecodedSplats:
    """Map the unconstrained vector to physical splat parameters."""
    theta = _theta_of(params)
    if not np.all(np.isfinite(theta)):
        raise ValueError("splat parameters must be finite")
    m = theta.reshape(-1, PARAMS_PER_SPLAT)
    return DecodedSplats(
        amplitude=np.exp(m[:, 0]),
        centers=m[:, 1:3].copy(),
        scale_x=np.exp(m[:, 3]),
        scale_y=np.exp(m[:, 4]),
        angle=wrap_angle(m[:, 5]),
    )


def encode_params(amplitude, centers, scale_x, scale_y, angle) -> SplatParams:
    """Inverse of :func:`decode_params` for positive amplitudes and scales."""
    amplitude = np.atleast_1d(np.asarray(amplitude, dtype=float))
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    scale_x = np.atleast_1d(np.asarray(scale_x, dtype=float))
    scale_y = np.atleast_1d(np.asarray(scale_y, dtype=float))
    angle = np.atleast_1d(np.asarray(angle, dtype=float))
    if np.any(amplitude <= 0) or np.any(scale_x <= 0) or np.any(scale_y <= 0):
        raise ValueError("amplitudes and scales must be positive")
    m = np.column_stack(
        [np.log(amplitude), centers[:, 0], centers[:, 1], np.log(scale_x), np.log(scale_y), angle]
    )
    return SplatParams(theta=m.reshape(-1))


def splat_support(center, scale_x, scale_y, angle, grid: Grid, n_sigma: float = 3.5) -> np.ndarray:
    """Active pixels inside the bounding box of the rotated n_sigma ellipse.

    The box is a superset of the exact ellipse, so field values at excluded
    pixels are below amplitude * exp(-n_sigma^2 / 2).
    """
    if n_sigma <= 0:
        raise ValueError(f"n_sigma must be positive, got {n_sigma}")
    c, s = np.cos(angle), np.sin(angle)
    ext_x = n_sigma * np.hypot(scale_x * c, scale_y * s)
    ext_y = n_sigma * np.hypot(scale_x * s, scale_y * c)
    xy = grid.active_xy
    inside = (np.abs(xy[:, 0] - center[0]) <= ext_x) & (np.abs(xy[:, 1] - center[1]) <= ext_y)
    return np.flatnonzero(inside)


def _splat_frame(decoded: DecodedSplats, k: int, xy: np.ndarray):
    """Rotated local coordinates (u, v) of pixels ``xy`` for splat ``k``."""
    c, s = np.cos(decoded.angle[k]), np.sin(decoded.angle[k])
    dx = xy[:, 0] - decoded.centers[k, 0]
    dy = xy[:, 1] - decoded.centers[k, 1]
    return c * dx + s * dy, -s * dx + c * dy


def rasterize(params, grid: Grid, n_sigma: float = 3.5) -> SplatFieldEval:
    """Evaluate the splat sum on the active pixels with truncated support."""
    decoded = decode_params(params)
    field = np.zeros(grid.n_active)
    supports = []
    for k in range(decoded.n_splats):
        idx = splat_support(
            decoded.centers[k], decoded.scale_x[k], decoded.scale_y[k],
            decoded.angle[k], grid, n_sigma,
        )
        supports.append(idx)
        if idx.size == 0:
            continue
        u, v = _splat_frame(decoded, k, grid.active_xy[idx])
        q = (u / decoded.scale_x[k]) ** 2 + (v / decoded.scale_y[k]) ** 2
        field[idx] += decoded.amplitude[k] * np.exp(-0.5 * q)
    return SplatFieldEval(field=field, supports=supports)


def field_param_gradients(params, grid: Grid, n_sigma: float = 3.5) -> FieldGradients:
    """Closed-form partials of the rasterized field w.r.t. each parameter.

    For one splat with value g = amplitude * exp(-(u^2/sx^2 + v^2/sy^2)/2):

        d g / d log_amplitude = g
        d g / d x_center      = g * (u cos / sx^2 - v sin / sy^2)
        d g / d y_center      = g * (u sin / sx^2 + v cos / sy^2)
        d g / d log_scale_x   = g * u^2 / sx^2
        d g / d log_scale_y   = g * v^2 / sy^2
        d g / d angle         = g * u v * (1/sy^2 - 1/sx^2)
    """
    decoded = decode_params(params)
    supports = []
    blocks = []
    for k in range(decoded.n_splats):
        idx = splat_support(
            decoded.centers[k], decoded.scale_x[k], decoded.scale_y[k],
            decoded.angle[k], grid, n_sigma,
        )
        supports.append(idx)
        if idx.size == 0:
            blocks.append(np.zeros((0, PARAMS_PER_SPLAT)))
            continue
        sx2 = decoded.scale_x[k] ** 2
        sy2 = decoded.scale_y[k] ** 2
        c, s = np.cos(decoded.angle[k]), np.sin(decoded.angle[k])
        u, v = _splat_frame(decoded, k, grid.active_xy[idx])
        g = decoded.amplitude[k] * np.exp(-0.5 * (u**2 / sx2 + v**2 / sy2))
        block = np.empty((idx.size, PARAMS_PER_SPLAT))
        block[:, 0] = g
        block[:, 1] = g * (u * c / sx2 - v * s / sy2)
        block[:, 2] = g * (u * s / sx2 + v * c / sy2)
        block[:, 3] = g * u**2 / sx2
        block[:, 4] = g * v**2 / sy2
        block[:, 5] = g * u * v * (1.0 / sy2 - 1.0 / sx2)
        blocks.append(block)
    return FieldGradients(supports=supports, blocks=blocks)


def splats_to_rows(params) -> list[tuple]:
    """Decoded per-splat rows (k, alpha, x, y, sx, sy, theta_deg) for export."""
    decoded = decode_params(params)
    return [
        (
            k,
            float(decoded.amplitude[k]),
            float(decoded.centers[k, 0]),
            float(decoded.centers[k, 1]),
            float(decoded.scale_x[k]),
            float(decoded.scale_y[k]),
            float(np.degrees(decoded.angle[k])),
        )
        for k in range(decoded.n_splats)
    ]
