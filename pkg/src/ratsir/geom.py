"""Box geometry for relation-aware tokenization and the weak-perspective camera.

Coordinate conventions: boxes live in image pixels as [c_x, c_y, s_x, s_y]
with (c_x, c_y) the center and (s_x, s_y) the full side lengths. Patch grids
are indexed 0-based, column i in [0, W) and row k in [0, H); the patch-center
formula is applied exactly as stated (no half-patch offset), so the map is
slightly asymmetric about the box center on even grids.

All functions are pure and compute in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in image pixels: center (c_x, c_y), full sides (s_x, s_y)."""

    c_x: float
    c_y: float
    s_x: float
    s_y: float

    def __post_init__(self):
        vals = (self.c_x, self.c_y, self.s_x, self.s_y)
        if not all(np.isfinite(vals)):
            raise ValueError(f"box has non-finite entries: {vals}")
        if self.s_x < 0 or self.s_y < 0:
            raise ValueError(f"box sides must be >= 0, got ({self.s_x}, {self.s_y})")

    @property
    def corner(self) -> np.ndarray:
        """Top-left corner (c - s/2)."""
        return np.array([self.c_x - self.s_x / 2.0, self.c_y - self.s_y / 2.0])

    def as_array(self) -> np.ndarray:
        return np.array([self.c_x, self.c_y, self.s_x, self.s_y], dtype=np.float64)


@dataclass(frozen=True)
class WeakPerspectiveCamera:
    """Orthographic camera: uniform scale (pixels per meter) + 2D translation (pixels)."""

    scale: float
    t_x: float
    t_y: float

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"camera scale must be finite and > 0, got {self.scale}")
        if not (np.isfinite(self.t_x) and np.isfinite(self.t_y)):
            raise ValueError("camera translation must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.scale, self.t_x, self.t_y], dtype=np.float64)


def position_map(box: BoundingBox, H: int, W: int) -> np.ndarray:
    """Per-patch center positions for `box` on an H x W grid, shape (H, W, 2).

    values[k, i] = [c_x + (2i - W) * s_x / (2W),  c_y + (2k - H) * s_y / (2H)]
    """
    if H < 1 or W < 1:
        raise ValueError(f"grid must be at least 1x1, got H={H}, W={W}")
    i = np.arange(W, dtype=np.float64)
    k = np.arange(H, dtype=np.float64)
    x = box.c_x + (2.0 * i - W) * box.s_x / (2.0 * W)
    y = box.c_y + (2.0 * k - H) * box.s_y / (2.0 * H)
    out = np.empty((H, W, 2), dtype=np.float64)
    out[..., 0] = x[None, :]
    out[..., 1] = y[:, None]
    return out


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign to stay overflow-free for large |x|.
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relative_distance_map(
    C_self: np.ndarray, C_other: np.ndarray, s_self: tuple[float, float], tau: float
) -> np.ndarray:
    """Sigmoid-squashed per-patch offsets of this hand's patch centers from the
    other hand's, normalized by this hand's box scale. Shape (H, W, 2), entries in (0, 1).
    """
    if C_self.shape != C_other.shape:
        raise ValueError(f"position maps disagree: {C_self.shape} vs {C_other.shape}")
    s = np.asarray(s_self, dtype=np.float64)
    if np.any(s == 0):
        raise ValueError(f"box scale has a zero component: {tuple(s)}")
    # The sigmoid is strictly inside (0, 1); keep that true under float64
    # rounding for saturated arguments.
    eps = 1e-15
    return np.clip(sigmoid(tau * (C_self - C_other) / s), eps, 1.0 - eps)


def distance_logits(
    C_self: np.ndarray, C_other: np.ndarray, s_self: tuple[float, float], tau: float
) -> np.ndarray:
    """Pre-activation argument of relative_distance_map (used by antisymmetry checks)."""
    s = np.asarray(s_self, dtype=np.float64)
    if np.any(s == 0):
        raise ValueError(f"box scale has a zero component: {tuple(s)}")
    return tau * (C_self - C_other) / s


def overlap_map(C_self: np.ndarray, other_box: BoundingBox) -> np.ndarray:
    """+1 where this hand's patch center lies inside the other box (closed
    rectangle), -1 elsewhere. Shape (H, W, 1)."""
    x = C_self[..., 0]
    y = C_self[..., 1]
    inside = (
        (x >= other_box.c_x - other_box.s_x / 2.0)
        & (x <= other_box.c_x + other_box.s_x / 2.0)
        & (y >= other_box.c_y - other_box.s_y / 2.0)
        & (y <= other_box.c_y + other_box.s_y / 2.0)
    )
    return np.where(inside, 1.0, -1.0)[..., None]


def relation_channels(
    box_self: BoundingBox, box_other: BoundingBox, H: int, W: int, tau: float
) -> np.ndarray:
    """Stacked 5-channel relation input for one hand: its distance map to the
    other hand, the other hand's distance map back, and its overlap map.
    Shape (H, W, 5)."""
    C_s = position_map(box_self, H, W)
    C_o = position_map(box_other, H, W)
    d_so = relative_distance_map(C_s, C_o, (box_self.s_x, box_self.s_y), tau)
    d_os = relative_distance_map(C_o, C_s, (box_other.s_x, box_other.s_y), tau)
    o_so = overlap_map(C_s, box_other)
    return np.concatenate([d_so, d_os, o_so], axis=-1)


def relation_channels_pair(
    box_r: BoundingBox, box_l: BoundingBox, H: int, W: int, tau: float
) -> np.ndarray:
    """Relation inputs for both hands, shape (2, H, W, 5); index 0 = right."""
    return np.stack(
        [
            relation_channels(box_r, box_l, H, W, tau),
            relation_channels(box_l, box_r, H, W, tau),
        ]
    )


def project(camera: WeakPerspectiveCamera, points3d: np.ndarray) -> np.ndarray:
    """Weak-perspective projection: scale * (x, y) + t. z is dropped. (..., 3) -> (..., 2)."""
    pts = np.asarray(points3d, dtype=np.float64)
    return camera.scale * pts[..., :2] + np.array([camera.t_x, camera.t_y])
