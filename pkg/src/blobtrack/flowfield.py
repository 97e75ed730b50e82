"""Surface of Active Events and the field of active flow directions.

The surface stores the most recent event timestamp per pixel.  Local
motion direction at an event is recovered by weighted line regression on
the surrounding timestamps: the direction orthogonal to the line is the
eigenvector of the 2x2 weighted scatter matrix with smallest eigenvalue,
with weights decaying exponentially in timestamp age.  Estimated
directions are cached per pixel (with their estimation time) in the flow
direction field; a second regression of the same form over cached
directions yields the locally dominant flow direction.

Directions are elements of the projective space of 2D lines: d and -d are
the same direction.  The stored representative has positive second
component, or zero second and positive first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numba import njit


@dataclass
class FlowParams:
    patch_radius: int = 3  # 7x7 window
    alpha: float = 70.0  # recency rate, 1/s; weight exp(-2*alpha*age)
    delta_max: float = 0.05  # staleness cutoff, s
    min_neighbors: int = 4

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.patch_radius < 1:
            raise ValueError("patch_radius must be >= 1")


@njit(cache=True)
def _smallest_eigvec_2x2(a: float, b: float, c: float) -> Tuple[float, float]:
    """Unit eigenvector for the smallest eigenvalue of [[a, b], [b, c]].

    Isotropic ties resolve to the first coordinate axis.
    """
    if b == 0.0:
        if a <= c:
            return 1.0, 0.0
        return 0.0, 1.0
    half_diff = 0.5 * (a - c)
    d = math.hypot(half_diff, b)
    lam_min = 0.5 * (a + c) - d
    # pick the better-conditioned eigenvector expression
    v1x, v1y = b, lam_min - a
    v2x, v2y = lam_min - c, b
    if v1x * v1x + v1y * v1y >= v2x * v2x + v2y * v2y:
        vx, vy = v1x, v1y
    else:
        vx, vy = v2x, v2y
    m = max(abs(vx), abs(vy))
    if m == 0.0:
        return 1.0, 0.0
    # rescale before hypot so subnormal components do not round the norm
    vx /= m
    vy /= m
    norm = math.hypot(vx, vy)
    return vx / norm, vy / norm


@njit(cache=True)
def _sign_normalize(vx: float, vy: float) -> Tuple[float, float]:
    if vy < 0.0 or (vy == 0.0 and vx < 0.0):
        return -vx, -vy
    return vx, vy


@njit(cache=True)
def _flow_direction_kernel(
    surface_t: np.ndarray,
    x: int,
    y: int,
    t_us: int,
    radius: int,
    alpha: float,
    delta_max: float,
    min_neighbors: int,
) -> Tuple[bool, float, float]:
    """Line-fit direction at (x, y); returns (ok, vx, vy) sign-normalized."""
    height, width = surface_t.shape
    m00 = 0.0
    m01 = 0.0
    m11 = 0.0
    count = 0
    for yy in range(max(0, y - radius), min(height, y + radius + 1)):
        for xx in range(max(0, x - radius), min(width, x + radius + 1)):
            if xx == x and yy == y:
                continue
            ts = surface_t[yy, xx]
            if ts < 0:
                continue
            delta = (t_us - ts) * 1e-6
            if delta > delta_max:
                continue
            w = math.exp(-2.0 * alpha * delta)
            ax = float(xx - x)
            ay = float(yy - y)
            m00 += w * ax * ax
            m01 += w * ax * ay
            m11 += w * ay * ay
            count += 1
    if count < min_neighbors:
        return False, 0.0, 0.0
    px, py = _smallest_eigvec_2x2(m00, m01, m11)
    # rotate the line normal by 90 degrees to get the line direction
    vx, vy = _sign_normalize(-py, px)
    return True, vx, vy


@njit(cache=True)
def _dominant_direction_kernel(
    field_vx: np.ndarray,
    field_vy: np.ndarray,
    field_t: np.ndarray,
    x: int,
    y: int,
    t_us: int,
    radius: int,
    alpha: float,
    delta_max: float,
    min_neighbors: int,
) -> Tuple[bool, float, float]:
    """Direction orthogonal to the dominant cached flow around (x, y)."""
    height, width = field_t.shape
    n00 = 0.0
    n01 = 0.0
    n11 = 0.0
    count = 0
    for yy in range(max(0, y - radius), min(height, y + radius + 1)):
        for xx in range(max(0, x - radius), min(width, x + radius + 1)):
            ts = field_t[yy, xx]
            if ts < 0:
                continue
            delta = (t_us - ts) * 1e-6
            if delta > delta_max:
                continue
            w = math.exp(-2.0 * alpha * delta)
            dx = field_vx[yy, xx]
            dy = field_vy[yy, xx]
            n00 += w * dx * dx
            n01 += w * dx * dy
            n11 += w * dy * dy
            count += 1
    if count < min_neighbors:
        return False, 0.0, 0.0
    px, py = _smallest_eigvec_2x2(n00, n01, n11)
    px, py = _sign_normalize(px, py)
    return True, px, py


class SurfaceOfActiveEvents:
    """Per-pixel timestamp of the most recent event; -1 marks never-fired."""

    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self.t = np.full((height, width), -1, dtype=np.int64)

    def update(self, event) -> None:
        if not (0 <= event.x < self.width and 0 <= event.y < self.height):
            raise ValueError(f"event at ({event.x}, {event.y}) outside sensor bounds")
        self.t[event.y, event.x] = event.t

    def is_valid(self, x: int, y: int) -> bool:
        return self.t[y, x] >= 0

    def timestamp(self, x: int, y: int) -> int:
        return int(self.t[y, x])


class FlowDirectionField:
    """Per-pixel most recent estimated flow direction and estimation time."""

    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self.vx = np.zeros((height, width), dtype=np.float64)
        self.vy = np.zeros((height, width), dtype=np.float64)
        self.t = np.full((height, width), -1, dtype=np.int64)

    def update(self, x: int, y: int, direction, t_us: int) -> None:
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise ValueError(f"position ({x}, {y}) outside sensor bounds")
        dx, dy = float(direction[0]), float(direction[1])
        if abs(math.hypot(dx, dy) - 1.0) > 1e-9:
            raise ValueError("direction must be unit-norm")
        if dy < 0.0 or (dy == 0.0 and dx < 0.0):
            raise ValueError("direction must be sign-normalized (second component positive)")
        self.vx[y, x] = dx
        self.vy[y, x] = dy
        self.t[y, x] = t_us

    def get(self, x: int, y: int):
        if self.t[y, x] < 0:
            return None
        return np.array([self.vx[y, x], self.vy[y, x]]), int(self.t[y, x])


def estimate_flow_direction(
    surface: SurfaceOfActiveEvents, event, params: FlowParams
) -> Optional[np.ndarray]:
    """Direction of the local line of recent timestamps through the event.

    The event must already be applied to the surface.  Returns None when
    fewer than ``min_neighbors`` recent in-bounds pixels contribute.
    """
    ok, vx, vy = _flow_direction_kernel(
        surface.t,
        int(event.x),
        int(event.y),
        int(event.t),
        params.patch_radius,
        params.alpha,
        params.delta_max,
        params.min_neighbors,
    )
    if not ok:
        return None
    return np.array([vx, vy])


def estimate_dominant_direction(
    field: FlowDirectionField, event, params: FlowParams
) -> Optional[np.ndarray]:
    """Unit vector orthogonal to the dominant cached flow around the event."""
    ok, vx, vy = _dominant_direction_kernel(
        field.vx,
        field.vy,
        field.t,
        int(event.x),
        int(event.y),
        int(event.t),
        params.patch_radius,
        params.alpha,
        params.delta_max,
        params.min_neighbors,
    )
    if not ok:
        return None
    return np.array([vx, vy])


def dump_surface_csv(surface: SurfaceOfActiveEvents, path) -> None:
    np.savetxt(path, surface.t, fmt="%d", delimiter=",")


def dump_surface_pgm(surface: SurfaceOfActiveEvents, path) -> None:
    t = surface.t.astype(np.float64)
    valid = t >= 0
    if valid.any():
        lo, hi = t[valid].min(), t[valid].max()
        span = max(hi - lo, 1.0)
        img = np.where(valid, 1 + (254 * (t - lo) / span), 0).astype(np.uint8)
    else:
        img = np.zeros_like(t, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (surface.width, surface.height))
        f.write(img.tobytes())
