"""Synthetic labelled-scene generator.

Samples event streams from the generative blob model: Poisson-process
event times, polarity drawn uniformly, and positions Gaussian around the
moving blob center offset by polarity, with covariance Lambda^2.  Scenes
merge any number of objects with uniform or structured-flicker background
noise, and emit a 1 kHz ground-truth trajectory table alongside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .blob_model import BlobState
from .events import EventArray

GT_CADENCE_US = 1000  # ground-truth trajectory sampling period (1 kHz)

GT_HEADER = "t_us,label,px,py,vx,vy,theta,q,l1,l2,dx,dy"


@dataclass
class TrajectorySpec:
    """One object's motion: piecewise-constant velocity between waypoints.

    Waypoints are (t_seconds, x, y) tuples.  Without waypoints the object
    moves at constant velocity from its initial position.  Orientation
    advances at the constant angular rate q; lam and delta are constant.
    """

    p: Tuple[float, float]
    v: Tuple[float, float] = (0.0, 0.0)
    theta: float = 0.0
    q: float = 0.0
    lam: Tuple[float, float] = (3.0, 1.5)
    delta: Tuple[float, float] = (0.0, 0.0)
    waypoints: Optional[List[Tuple[float, float, float]]] = None
    rate: float = 10000.0  # events/s

    def state_at(self, t: float) -> BlobState:
        p, v = self._position_velocity(t)
        return BlobState(
            p=np.array(p),
            v=np.array(v),
            theta=self.theta + self.q * t,
            q=self.q,
            lam=np.array(self.lam, dtype=np.float64),
            delta=np.array(self.delta, dtype=np.float64),
        )

    def positions_at(self, times: np.ndarray):
        """Vectorized position lookup over an array of times (seconds)."""
        if not self.waypoints:
            return self.p[0] + self.v[0] * times, self.p[1] + self.v[1] * times
        pts = [(0.0, self.p[0], self.p[1])] + [tuple(w) for w in self.waypoints]
        wt = np.array([w[0] for w in pts])
        wx = np.array([w[1] for w in pts])
        wy = np.array([w[2] for w in pts])
        return np.interp(times, wt, wx), np.interp(times, wt, wy)

    def _position_velocity(self, t: float):
        if not self.waypoints:
            return (
                (self.p[0] + self.v[0] * t, self.p[1] + self.v[1] * t),
                (self.v[0], self.v[1]),
            )
        pts = [(0.0, self.p[0], self.p[1])] + [tuple(w) for w in self.waypoints]
        for (t0, x0, y0), (t1, x1, y1) in zip(pts, pts[1:]):
            if t <= t1 and t1 > t0:
                f = (t - t0) / (t1 - t0)
                vx = (x1 - x0) / (t1 - t0)
                vy = (y1 - y0) / (t1 - t0)
                return ((x0 + f * (x1 - x0), y0 + f * (y1 - y0)), (vx, vy))
        # past the last waypoint: hold the final position
        t_last, x_last, y_last = pts[-1]
        return ((x_last, y_last), (0.0, 0.0))


@dataclass
class FlickerRegion:
    """Rectangular region emitting spatially uniform clutter events."""

    x0: int
    y0: int
    x1: int
    y1: int
    rate: float  # events/s inside the region


@dataclass
class SceneConfig:
    width: int = 640
    height: int = 480
    duration: float = 1.0  # seconds
    objects: List[TrajectorySpec] = field(default_factory=list)
    noise_rate: float = 0.0  # uniform background events/s
    flicker_regions: List[FlickerRegion] = field(default_factory=list)
    seed: int = 0

    def validate(self) -> None:
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.noise_rate < 0:
            raise ValueError("noise rate must be non-negative")
        for i, obj in enumerate(self.objects):
            if obj.rate <= 0:
                raise ValueError(f"object {i}: rate must be positive")
            if obj.lam[0] <= 0 or obj.lam[1] <= 0:
                raise ValueError(f"object {i}: lam components must be positive")
        for i, r in enumerate(self.flicker_regions):
            if r.rate < 0:
                raise ValueError(f"flicker region {i}: rate must be non-negative")


def generate_blob_events(
    trajectory: TrajectorySpec,
    duration: float,
    label: int,
    rng: np.random.Generator,
    width: int,
    height: int,
):
    """Sample one object's labelled events over [0, duration].

    Returns (t_us, x, y, polarity, label) column arrays in time order;
    off-sensor samples are discarded after rounding to integer pixels.
    """
    if trajectory.rate <= 0:
        raise ValueError("rate must be positive")
    n_expected = trajectory.rate * duration
    n = rng.poisson(n_expected)
    times = np.sort(rng.uniform(0.0, duration, size=n))
    sigma = rng.integers(0, 2, size=n).astype(np.int8) * 2 - 1
    normals = rng.standard_normal((n, 2))

    px, py = trajectory.positions_at(times)
    theta = trajectory.theta + trajectory.q * times
    c, s = np.cos(theta), np.sin(theta)
    # position ~ N(p + sigma*delta, Lambda^2): mean + R diag(lam) n
    nx = trajectory.lam[0] * normals[:, 0]
    ny = trajectory.lam[1] * normals[:, 1]
    xs = px + sigma * trajectory.delta[0] + c * nx - s * ny
    ys = py + sigma * trajectory.delta[1] + s * nx + c * ny

    xi = np.floor(xs + 0.5).astype(np.int32)
    yi = np.floor(ys + 0.5).astype(np.int32)
    keep = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
    t_us = np.floor(times[keep] * 1e6).astype(np.int64)
    return (
        t_us,
        xi[keep],
        yi[keep],
        sigma[keep],
        np.full(int(keep.sum()), label, dtype=np.uint32),
    )


def _uniform_noise(rate, duration, rng, x0, y0, x1, y1):
    n = rng.poisson(rate * duration)
    t_us = np.sort(np.floor(rng.uniform(0.0, duration, size=n) * 1e6).astype(np.int64))
    xs = rng.integers(x0, x1, size=n).astype(np.int32)
    ys = rng.integers(y0, y1, size=n).astype(np.int32)
    pol = (rng.integers(0, 2, size=n).astype(np.int8) * 2 - 1)
    lab = np.zeros(n, dtype=np.uint32)
    return t_us, xs, ys, pol, lab


def generate_scene(config: SceneConfig) -> Tuple[EventArray, np.ndarray]:
    """Generate a merged labelled event stream and its ground-truth table.

    The ground-truth table has one row per (1 ms sample, object):
    t_us, label, px, py, vx, vy, theta, q, l1, l2, dx, dy.
    Identical configs (including seed) produce identical output.
    """
    config.validate()
    root = np.random.default_rng(config.seed)
    streams = []
    # one child generator per source keeps streams independent of ordering
    n_sources = len(config.objects) + 1 + len(config.flicker_regions)
    children = root.spawn(n_sources)

    for label, obj in enumerate(config.objects, start=1):
        streams.append(
            generate_blob_events(
                obj, config.duration, label, children[label - 1], config.width, config.height
            )
        )

    noise_rng = children[len(config.objects)]
    if config.noise_rate > 0:
        streams.append(
            _uniform_noise(
                config.noise_rate, config.duration, noise_rng, 0, 0, config.width, config.height
            )
        )
    for i, region in enumerate(config.flicker_regions):
        if region.rate > 0:
            streams.append(
                _uniform_noise(
                    region.rate,
                    config.duration,
                    children[len(config.objects) + 1 + i],
                    max(0, region.x0),
                    max(0, region.y0),
                    min(config.width, region.x1),
                    min(config.height, region.y1),
                )
            )

    if streams:
        t = np.concatenate([s[0] for s in streams])
        x = np.concatenate([s[1] for s in streams])
        y = np.concatenate([s[2] for s in streams])
        p = np.concatenate([s[3] for s in streams])
        lab = np.concatenate([s[4] for s in streams])
        emission = np.concatenate([np.arange(len(s[0]), dtype=np.int64) for s in streams])
        order = np.lexsort((emission, lab, t))  # stable tie-break: (t, label, emission)
        events = EventArray(
            config.width, config.height, t[order], x[order], y[order], p[order], lab[order]
        )
    else:
        events = EventArray(
            config.width,
            config.height,
            np.empty(0, np.int64),
            np.empty(0, np.int32),
            np.empty(0, np.int32),
            np.empty(0, np.int8),
            np.empty(0, np.uint32),
        )

    gt = ground_truth_table(config)
    return events, gt


def ground_truth_table(config: SceneConfig) -> np.ndarray:
    n_samples = int(math.floor(config.duration * 1e6 / GT_CADENCE_US)) + 1
    rows = []
    for k in range(n_samples):
        t_us = k * GT_CADENCE_US
        t = t_us / 1e6
        for label, obj in enumerate(config.objects, start=1):
            st = obj.state_at(t)
            rows.append(
                [
                    t_us, label,
                    st.p[0], st.p[1], st.v[0], st.v[1],
                    st.theta, st.q, st.lam[0], st.lam[1],
                    st.delta[0], st.delta[1],
                ]
            )
    return np.array(rows, dtype=np.float64).reshape(-1, 12)


_SCENE_KEYS = {"width", "height", "duration", "seed", "noise_rate", "flicker_regions", "objects"}
_OBJECT_KEYS = {"p", "v", "theta", "q", "lam", "delta", "waypoints", "rate"}
_REGION_KEYS = {"x0", "y0", "x1", "y1", "rate"}


def scene_from_dict(d: dict) -> SceneConfig:
    """Build and validate a SceneConfig from parsed JSON."""
    unknown = set(d) - _SCENE_KEYS
    if unknown:
        raise ValueError(f"unknown scene keys: {sorted(unknown)}")
    objects = []
    for i, od in enumerate(d.get("objects", [])):
        bad = set(od) - _OBJECT_KEYS
        if bad:
            raise ValueError(f"object {i}: unknown keys {sorted(bad)}")
        objects.append(
            TrajectorySpec(
                p=tuple(od["p"]),
                v=tuple(od.get("v", (0.0, 0.0))),
                theta=float(od.get("theta", 0.0)),
                q=float(od.get("q", 0.0)),
                lam=tuple(od.get("lam", (3.0, 1.5))),
                delta=tuple(od.get("delta", (0.0, 0.0))),
                waypoints=[tuple(w) for w in od["waypoints"]] if od.get("waypoints") else None,
                rate=float(od.get("rate", 10000.0)),
            )
        )
    regions = []
    for i, rd in enumerate(d.get("flicker_regions", [])):
        bad = set(rd) - _REGION_KEYS
        if bad:
            raise ValueError(f"flicker region {i}: unknown keys {sorted(bad)}")
        regions.append(
            FlickerRegion(int(rd["x0"]), int(rd["y0"]), int(rd["x1"]), int(rd["y1"]), float(rd["rate"]))
        )
    cfg = SceneConfig(
        width=int(d.get("width", 640)),
        height=int(d.get("height", 480)),
        duration=float(d.get("duration", 1.0)),
        objects=objects,
        noise_rate=float(d.get("noise_rate", 0.0)),
        flicker_regions=regions,
        seed=int(d.get("seed", 0)),
    )
    cfg.validate()
    return cfg


def write_ground_truth(path, gt: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write(GT_HEADER + "\n")
        for row in gt:
            f.write(
                f"{int(row[0])},{int(row[1])},"
                + ",".join(format(v, ".6f") for v in row[2:])
                + "\n"
            )


def read_ground_truth(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
