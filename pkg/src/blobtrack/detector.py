"""Candidate detection from unassociated events.

An event whose freshly regressed flow direction agrees with the dominant
direction cached in its neighbourhood indicates locally consistent linear
motion: the correlation score C (inner product of the new direction with
the vector orthogonal to the dominant flow) is near zero.  Events with
C below the threshold spawn candidate detections, with motion sign and
speed recovered from the timestamp gradient along the line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numba import njit

from .flowfield import (
    FlowDirectionField,
    FlowParams,
    SurfaceOfActiveEvents,
    _dominant_direction_kernel,
    _flow_direction_kernel,
)


@dataclass
class DetectorParams:
    gamma: float = 0.3  # correlation threshold; low favours recall
    s_default: float = 500.0  # fallback speed, px/s
    s_min: float = 50.0
    s_max: float = 5000.0
    suppression_radius: float = 10.0  # px; no new candidate near a live track

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")


@dataclass
class Detection:
    x: int
    y: int
    t: int  # microseconds
    direction: np.ndarray  # unit vector pointing along motion
    speed: float  # px/s
    score: float  # correlation C at detection time


@njit(cache=True)
def _initial_speed_kernel(
    surface_t: np.ndarray,
    x: int,
    y: int,
    t_us: int,
    dir_x: float,
    dir_y: float,
    radius: int,
    alpha: float,
    delta_max: float,
    s_default: float,
    s_min: float,
    s_max: float,
) -> Tuple[float, float, float]:
    """Sign-resolve a line direction and estimate speed from timestamp ages.

    Fits age = m * (projection along direction) + b by weighted least
    squares over the regression patch.  Ages shrink ahead of the motion,
    so a negative slope confirms the direction and speed = 1/|m|.
    """
    height, width = surface_t.shape
    sw = 0.0
    ss = 0.0
    sd = 0.0
    sss = 0.0
    ssd = 0.0
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
            proj = (xx - x) * dir_x + (yy - y) * dir_y
            sw += w
            ss += w * proj
            sd += w * delta
            sss += w * proj * proj
            ssd += w * proj * delta
    denom = sw * sss - ss * ss
    if denom <= 1e-12:
        return dir_x, dir_y, s_default
    m = (sw * ssd - ss * sd) / denom
    if abs(m) < 1e-6:
        return dir_x, dir_y, s_default
    if m > 0.0:
        dir_x, dir_y = -dir_x, -dir_y
    speed = 1.0 / abs(m)
    if speed < s_min:
        speed = s_min
    elif speed > s_max:
        speed = s_max
    return dir_x, dir_y, speed


@njit(cache=True)
def _detect_kernel(
    surface_t: np.ndarray,
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
    gamma: float,
    s_default: float,
    s_min: float,
    s_max: float,
) -> Tuple[int, float, float, float, float]:
    """Full detection step for one unassociated event.

    Updates the flow field at the event pixel as a side effect.  Returns
    (hit, dir_x, dir_y, speed, score) with hit in {0, 1}.
    """
    ok, vx, vy = _flow_direction_kernel(
        surface_t, x, y, t_us, radius, alpha, delta_max, min_neighbors
    )
    if not ok:
        return 0, 0.0, 0.0, 0.0, 1.0
    field_vx[y, x] = vx
    field_vy[y, x] = vy
    field_t[y, x] = t_us
    ok, ox, oy = _dominant_direction_kernel(
        field_vx, field_vy, field_t, x, y, t_us, radius, alpha, delta_max, min_neighbors
    )
    if not ok:
        return 0, 0.0, 0.0, 0.0, 1.0
    score = abs(vx * ox + vy * oy)
    if score >= gamma:
        return 0, 0.0, 0.0, 0.0, score
    dir_x, dir_y, speed = _initial_speed_kernel(
        surface_t, x, y, t_us, vx, vy, radius, alpha, delta_max, s_default, s_min, s_max
    )
    return 1, dir_x, dir_y, speed, score


def estimate_initial_speed(
    surface: SurfaceOfActiveEvents,
    position,
    direction,
    params: DetectorParams,
    flow_params: Optional[FlowParams] = None,
    t_us: Optional[int] = None,
) -> Tuple[np.ndarray, float]:
    """Sign-resolved direction and speed estimate at a position.

    ``t_us`` defaults to the surface timestamp at the position.
    """
    flow_params = flow_params or FlowParams()
    x, y = int(position[0]), int(position[1])
    if t_us is None:
        t_us = surface.timestamp(x, y)
    dx, dy, speed = _initial_speed_kernel(
        surface.t,
        x,
        y,
        int(t_us),
        float(direction[0]),
        float(direction[1]),
        flow_params.patch_radius,
        flow_params.alpha,
        flow_params.delta_max,
        params.s_default,
        params.s_min,
        params.s_max,
    )
    return np.array([dx, dy]), float(speed)


def process_unassociated_event(
    event,
    surface: SurfaceOfActiveEvents,
    field: FlowDirectionField,
    params: DetectorParams,
    flow_params: Optional[FlowParams] = None,
) -> Optional[Detection]:
    """Run detection for an event that no track claimed.

    The event must already be applied to the surface.  The flow field is
    updated whenever the direction regression succeeds, whether or not a
    detection fires.
    """
    flow_params = flow_params or FlowParams()
    hit, dx, dy, speed, score = _detect_kernel(
        surface.t,
        field.vx,
        field.vy,
        field.t,
        int(event.x),
        int(event.y),
        int(event.t),
        flow_params.patch_radius,
        flow_params.alpha,
        flow_params.delta_max,
        flow_params.min_neighbors,
        params.gamma,
        params.s_default,
        params.s_min,
        params.s_max,
    )
    if not hit:
        return None
    return Detection(
        x=int(event.x),
        y=int(event.y),
        t=int(event.t),
        direction=np.array([dx, dy]),
        speed=speed,
        score=score,
    )
