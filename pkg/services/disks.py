"""
Disks Module - Procedural disk images with ground-truth factors

A disk of fixed radius and intensity on a uniform background. The three
generative factors are the disk center (c_x, c_y) and the background
intensity I_bg. Pixel (i, j) has its center at (j + 0.5, i + 0.5), and the
disk edge is a linear ramp of configurable width around the radius.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from services.rng import RngStream

logger = logging.getLogger(__name__)

FACTOR_NAMES = ("c_x", "c_y", "i_bg")
SEQUENCE_KINDS = ("linear-drift", "contrast-ramp")


class FactorRangeError(ValueError):
    """Raised when factors place the disk outside the image or I_bg outside [0, 1]."""


@dataclass(frozen=True)
class DiskConfig:
    size: int = 32
    radius: float = 8.0
    edge_width: float = 1.0
    foreground: float = 0.5

    @classmethod
    def from_config(cls, config) -> "DiskConfig":
        """Build from a RunConfig (image size from [model], the rest from [data])."""
        data = config.data
        return cls(config.model.image_size, data.radius, data.edge_width, data.foreground)

    @property
    def center_range(self) -> Tuple[float, float]:
        return self.radius, self.size - self.radius


@dataclass(frozen=True)
class DiskFactors:
    c_x: float
    c_y: float
    i_bg: float

    def as_array(self) -> np.ndarray:
        return np.array([self.c_x, self.c_y, self.i_bg], dtype=np.float64)


def check_factors(factors: np.ndarray, cfg: DiskConfig) -> None:
    """factors: [N, 3] rows of (c_x, c_y, I_bg)."""
    factors = np.atleast_2d(factors)
    low, high = cfg.center_range
    centers = factors[:, :2]
    bad = np.flatnonzero(np.any((centers < low) | (centers > high), axis=1)
                         | (factors[:, 2] < 0) | (factors[:, 2] > 1))
    if bad.size:
        row = factors[bad[0]]
        raise FactorRangeError(
            f"factors {row.tolist()} (row {bad[0]}) outside centers [{low}, {high}] / I_bg [0, 1]")


def render_batch(factors: np.ndarray, cfg: DiskConfig) -> np.ndarray:
    """Render rows of (c_x, c_y, I_bg) into images [N, 1, H, W]."""
    factors = np.atleast_2d(np.asarray(factors, dtype=np.float64))
    check_factors(factors, cfg)
    coords = np.arange(cfg.size, dtype=np.float64) + 0.5
    dx = coords[None, None, :] - factors[:, 0, None, None]
    dy = coords[None, :, None] - factors[:, 1, None, None]
    dist = np.sqrt(dx * dx + dy * dy)
    if cfg.edge_width > 0:
        weight = np.clip((cfg.radius + cfg.edge_width / 2 - dist) / cfg.edge_width, 0.0, 1.0)
    else:
        weight = (dist <= cfg.radius).astype(np.float64)
    background = factors[:, 2, None, None]
    images = weight * cfg.foreground + (1.0 - weight) * background
    return images[:, None, :, :]


def render_disk(factors: DiskFactors, cfg: DiskConfig) -> np.ndarray:
    """
    Render one disk as an [H, W] array.

    Raises:
        FactorRangeError: the disk is not fully inside the image
    """
    return render_batch(factors.as_array(), cfg)[0, 0]


def draw_factors(n: int, rng: RngStream, cfg: DiskConfig) -> np.ndarray:
    """n rows of independent uniform factors over their valid ranges."""
    low, high = cfg.center_range
    u = rng.uniform(0.0, 1.0, (n, 3))
    factors = np.empty_like(u)
    factors[:, :2] = low + (high - low) * u[:, :2]
    factors[:, 2] = u[:, 2]
    return factors


def generate_dataset(n: int, rng: RngStream, cfg: DiskConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    Returns:
        (images [n, 1, H, W], factors [n, 3])
    """
    if n < 1:
        raise ValueError("dataset size must be at least 1")
    factors = draw_factors(n, rng, cfg)
    images = render_batch(factors, cfg)
    logger.info("generated %d disk images (%dpx, radius %.1f)", n, cfg.size, cfg.radius)
    return images, factors


# ---------- factor grids ----------
def grid_centers(cfg: DiskConfig, steps: int, i_bg: float) -> np.ndarray:
    """(c_x, c_y) grid at fixed background, row-major over c_y then c_x: [steps^2, 3]."""
    low, high = cfg.center_range
    axis = np.linspace(low, high, steps)
    cy, cx = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([cx.ravel(), cy.ravel(), np.full(cx.size, float(i_bg))], axis=1)


def grid_x_background(cfg: DiskConfig, steps: int, c_y: Optional[float] = None) -> np.ndarray:
    """(c_x, I_bg) grid at fixed c_y (image center by default): [steps^2, 3]."""
    low, high = cfg.center_range
    c_y = cfg.size / 2 if c_y is None else c_y
    bg, cx = np.meshgrid(np.linspace(0.0, 1.0, steps), np.linspace(low, high, steps), indexing="ij")
    return np.stack([cx.ravel(), np.full(cx.size, float(c_y)), bg.ravel()], axis=1)


def grid_all(cfg: DiskConfig, steps: int) -> np.ndarray:
    """Full factorial grid over all three factors: [steps^3, 3]."""
    low, high = cfg.center_range
    axis = np.linspace(low, high, steps)
    cx, cy, bg = np.meshgrid(axis, axis, np.linspace(0.0, 1.0, steps), indexing="ij")
    return np.stack([cx.ravel(), cy.ravel(), bg.ravel()], axis=1)


# ---------- sequences ----------
@dataclass
class Sequence:
    frames: np.ndarray
    factors: np.ndarray
    kind: str

    def __len__(self):
        return self.frames.shape[0]


def generate_sequence(kind: str, length: int, rng: RngStream, cfg: DiskConfig,
                      start: Optional[np.ndarray] = None, velocity: Optional[np.ndarray] = None,
                      background: Optional[float] = None) -> Sequence:
    """
    A short clip along a straight line in factor space.

    linear-drift: the center moves with constant velocity (px per frame) at a fixed background.
    contrast-ramp: the background changes linearly at a fixed center.

    When start/velocity are omitted, start and end points are drawn inside the
    valid ranges, so the trajectory is valid by construction. start is a full
    factor row (c_x, c_y, I_bg); velocity is (v_x, v_y) for drift, a scalar for a ramp.

    Raises:
        FactorRangeError: an explicit trajectory leaves the valid range
    """
    if kind not in SEQUENCE_KINDS:
        raise ValueError(f"unknown sequence kind '{kind}'; expected one of {', '.join(SEQUENCE_KINDS)}")
    if length < 2:
        raise ValueError("a sequence needs at least 2 frames")
    steps = np.arange(length, dtype=np.float64)[:, None]

    if start is None:
        endpoints = draw_factors(2, rng, cfg)
        if background is not None:
            endpoints[:, 2] = background
        start = endpoints[0]
        if kind == "linear-drift":
            velocity = (endpoints[1, :2] - endpoints[0, :2]) / (length - 1)
        else:
            endpoints[1, :2] = endpoints[0, :2]
            velocity = (endpoints[1, 2] - endpoints[0, 2]) / (length - 1)
    start = np.asarray(start, dtype=np.float64)
    velocity = 0.0 if velocity is None else velocity
    if kind == "linear-drift":
        delta = np.array([*np.broadcast_to(np.asarray(velocity, dtype=np.float64), (2,)), 0.0])
    else:
        delta = np.array([0.0, 0.0, float(velocity)])
    factors = start[None, :] + steps * delta[None, :]
    check_factors(factors, cfg)
    return Sequence(render_batch(factors, cfg), factors, kind)
