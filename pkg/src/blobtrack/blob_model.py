"""Event-blob state representation, density, and chi-squared gating.

The blob state is a 10-vector (px, py, vx, vy, theta, q, l1, l2, dx, dy):
position, velocity, orientation, angular rate, principal axes, and the
polarity offset separating leading- and trailing-edge events.  The event
distribution around a blob is Gaussian with covariance Lambda^2, where
Lambda is the orientation-rotated diagonal of the principal axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

STATE_DIM = 10

# Index constants into the canonical state vector.
IX_PX, IX_PY, IX_VX, IX_VY, IX_TH, IX_Q, IX_L1, IX_L2, IX_DX, IX_DY = range(10)

LAMBDA_FLOOR = 0.5  # px; keeps Lambda^-2 bounded on degenerate shapes


@dataclass
class BlobState:
    """Friendly view of the 10-dimensional blob state."""

    p: np.ndarray
    v: np.ndarray
    theta: float
    q: float
    lam: np.ndarray
    delta: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.array(
            [
                self.p[0], self.p[1],
                self.v[0], self.v[1],
                self.theta, self.q,
                self.lam[0], self.lam[1],
                self.delta[0], self.delta[1],
            ],
            dtype=np.float64,
        )

    @staticmethod
    def from_vector(z: np.ndarray) -> "BlobState":
        z = np.asarray(z, dtype=np.float64)
        return BlobState(
            p=z[0:2].copy(),
            v=z[2:4].copy(),
            theta=float(z[4]),
            q=float(z[5]),
            lam=z[6:8].copy(),
            delta=z[8:10].copy(),
        )


@njit(cache=True)
def _wrap_theta(theta: float) -> float:
    """Wrap an orientation into (-pi/2, pi/2]; Lambda is pi-periodic."""
    t = theta % math.pi  # in [0, pi)
    if t > math.pi / 2.0:
        t -= math.pi
    return t


@njit(cache=True)
def _shape_matrix(theta: float, l1: float, l2: float) -> np.ndarray:
    c = math.cos(theta)
    s = math.sin(theta)
    out = np.empty((2, 2), dtype=np.float64)
    out[0, 0] = c * c * l1 + s * s * l2
    out[0, 1] = c * s * (l1 - l2)
    out[1, 0] = out[0, 1]
    out[1, 1] = s * s * l1 + c * c * l2
    return out


@njit(cache=True)
def _shape_matrix_inv(theta: float, l1: float, l2: float) -> np.ndarray:
    return _shape_matrix(theta, 1.0 / l1, 1.0 / l2)


@njit(cache=True)
def _residual(state: np.ndarray, ex: float, ey: float, sigma: float) -> np.ndarray:
    out = np.empty(2, dtype=np.float64)
    out[0] = ex - state[IX_PX] - sigma * state[IX_DX]
    out[1] = ey - state[IX_PY] - sigma * state[IX_DY]
    return out


@njit(cache=True)
def _mahalanobis_sq(state: np.ndarray, ex: float, ey: float, sigma: float) -> float:
    xt = _residual(state, ex, ey, sigma)
    li = _shape_matrix_inv(state[IX_TH], state[IX_L1], state[IX_L2])
    u = li @ xt
    return u[0] * u[0] + u[1] * u[1]


@njit(cache=True)
def _event_density(state: np.ndarray, ex: float, ey: float, sigma: float) -> float:
    d2 = _mahalanobis_sq(state, ex, ey, sigma)
    det = state[IX_L1] * state[IX_L2]
    return math.exp(-0.5 * d2) / (2.0 * math.pi * det)


def shape_matrix(theta: float, lam) -> np.ndarray:
    """Rotated principal-axis matrix Lambda = R(theta) diag(l1, l2) R(theta)^T."""
    l1, l2 = float(lam[0]), float(lam[1])
    if l1 <= 0.0 or l2 <= 0.0:
        raise ValueError(f"principal axes must be positive, got ({l1}, {l2})")
    return _shape_matrix(float(theta), l1, l2)


def event_density(state, event) -> float:
    """Gaussian density of an event under the blob model (covariance Lambda^2)."""
    z = _state_vec(state)
    return float(_event_density(z, float(event.x), float(event.y), float(event.polarity)))


def mahalanobis_sq(state, event) -> float:
    """Squared Mahalanobis distance of an event to the blob it may belong to."""
    z = _state_vec(state)
    return float(_mahalanobis_sq(z, float(event.x), float(event.y), float(event.polarity)))


def gate_threshold(significance: float) -> float:
    """Chi-squared (2 dof) critical value: -2 ln(1 - significance)."""
    if not 0.0 < significance < 1.0:
        raise ValueError(f"significance must be in (0, 1), got {significance}")
    return -2.0 * math.log(1.0 - significance)


def gate(d_sq: float, significance: float) -> bool:
    """Accept an event for a track iff d^2 is below the chi-squared critical value."""
    return d_sq <= gate_threshold(significance)


def wrap_theta(theta: float) -> float:
    return float(_wrap_theta(float(theta)))


def _state_vec(state) -> np.ndarray:
    if isinstance(state, BlobState):
        return state.as_vector()
    return np.asarray(state, dtype=np.float64)
