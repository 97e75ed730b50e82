"""Per-track asynchronous event-blob EKF.

The filter fuses two pseudo-measurements per associated event: a 2D
residual H = Lambda^-1 (xi - sigma*Delta - p) against the constant 0
(unit-Gaussian noise), and a scalar window statistic G, the sum of
squared normalized residuals over the last n associated events against
the constant 2n (chi-squared: variance 4n).  G makes the shape axes
observable.  The process model is constant velocity and constant angular
rate; the covariance update uses the Joseph form with explicit
symmetrization, since updates run at event rate.

Buffer discipline: the window holds the last n offset-corrected
residuals (event minus predicted position minus sigma*Delta, all at the
time of that event), and G re-normalizes all of them with the shape of
the *current* state.  That is what makes the shape axes observable:
every window entry contributes to the theta and lambda columns of the G
row.  The buffered residuals themselves stay fixed, so the G row has
zero position, velocity, and offset columns; Delta is estimated by the
H rows alone, which keeps the weakly observed offset from wandering
under the window statistic.  G is disabled until the window holds n
entries; the current residual is pushed after the update, using the
pre-update prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from numba import njit

from .blob_model import (
    IX_DX, IX_DY, IX_L1, IX_L2, IX_PX, IX_PY, IX_Q, IX_TH, IX_VX, IX_VY,
    LAMBDA_FLOOR, STATE_DIM,
    _shape_matrix_inv, _wrap_theta,
)
from .detector import Detection

UPDATE_OK = 0
UPDATE_DIVERGED = 1  # non-finite state or covariance: terminate the track


def _default_q_diag() -> np.ndarray:
    # spectral densities: position 0, velocity 200, theta 0, q 5, lam 0.5, delta 0.1
    return np.array([0.0, 0.0, 200.0, 200.0, 0.0, 5.0, 0.5, 0.5, 0.1, 0.1])


def _default_p0_diag() -> np.ndarray:
    # The velocity prior must cover the detector's speed estimate, which
    # can be off by several hundred px/s; an overconfident prior makes
    # the filter absorb the position drift into the shape axes instead
    # of correcting the velocity.
    return np.array([4.0, 4.0, 2.5e5, 2.5e5, 0.5, 10.0, 4.0, 4.0, 2.0, 2.0])


@dataclass
class FilterConfig:
    n: int = 20  # window length for the G statistic
    q_diag: np.ndarray = field(default_factory=_default_q_diag)
    p0_diag: np.ndarray = field(default_factory=_default_p0_diag)
    spawn_lam: Tuple[float, float] = (3.0, 1.5)
    spawn_delta_mag: float = 1.5  # px, along the detected motion direction
    # Scale on the G pseudo-measurement target.  When every event reaches
    # the filter the window statistic has expectation 2n and the scale is
    # 1.  When an association gate at squared distance g discards tail
    # events upstream, the surviving residuals follow a truncated
    # chi-square law with per-event mean below 2; without compensation
    # the target 2n reads as "shape too wide" and the axes collapse.
    # Use gate_truncation_scale(g) in that case.
    g_target_scale: float = 1.0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("window length n must be >= 2")
        self.q_diag = np.asarray(self.q_diag, dtype=np.float64)
        self.p0_diag = np.asarray(self.p0_diag, dtype=np.float64)
        if (self.q_diag < 0).any():
            raise ValueError("process noise densities must be non-negative")


def gate_truncation_scale(gate_d2: float) -> float:
    """Per-event mean of a chi-square(2) variable conditioned on falling
    below ``gate_d2``, divided by the unconditional mean 2.

    This is the correct ``g_target_scale`` when the filter only sees
    events that passed a squared-Mahalanobis gate at ``gate_d2``: with
    the scale in place the true shape is a stable fixed point of the
    pseudo-measurement, instead of an axis-collapse spiral where a
    shrinking shape tightens the gate and the tightened gate shrinks the
    shape further.
    """
    if gate_d2 <= 0:
        raise ValueError("gate threshold must be positive")
    q = math.exp(-0.5 * gate_d2)
    return 1.0 - 0.5 * gate_d2 * q / (1.0 - q)


@njit(cache=True)
def _predict_kernel(state: np.ndarray, cov: np.ndarray, dt: float, q_diag: np.ndarray) -> None:
    """Constant-velocity / constant-angular-rate prediction, in place."""
    state[IX_PX] += state[IX_VX] * dt
    state[IX_PY] += state[IX_VY] * dt
    state[IX_TH] = _wrap_theta(state[IX_TH] + state[IX_Q] * dt)
    f = np.eye(STATE_DIM)
    f[IX_PX, IX_VX] = dt
    f[IX_PY, IX_VY] = dt
    f[IX_TH, IX_Q] = dt
    new_cov = f @ cov @ f.T
    for i in range(STATE_DIM):
        new_cov[i, i] += q_diag[i] * dt
    for i in range(STATE_DIM):
        for j in range(STATE_DIM):
            cov[i, j] = 0.5 * (new_cov[i, j] + new_cov[j, i])


@njit(cache=True)
def _measurement_h_kernel(
    state: np.ndarray, ex: float, ey: float, sigma: float
) -> Tuple[np.ndarray, np.ndarray]:
    """H = Lambda^-1 (xi - sigma*Delta - p) and its 2x10 Jacobian."""
    theta = state[IX_TH]
    l1 = state[IX_L1]
    l2 = state[IX_L2]
    c = math.cos(theta)
    s = math.sin(theta)
    xt0 = ex - state[IX_PX] - sigma * state[IX_DX]
    xt1 = ey - state[IX_PY] - sigma * state[IX_DY]

    li = _shape_matrix_inv(theta, l1, l2)
    h = np.empty(2)
    h[0] = li[0, 0] * xt0 + li[0, 1] * xt1
    h[1] = li[1, 0] * xt0 + li[1, 1] * xt1

    jac = np.zeros((2, STATE_DIM))
    # d/dp = -Lambda^-1 ; d/dDelta = -sigma * Lambda^-1 ; v, q columns zero
    jac[0, IX_PX] = -li[0, 0]
    jac[0, IX_PY] = -li[0, 1]
    jac[1, IX_PX] = -li[1, 0]
    jac[1, IX_PY] = -li[1, 1]
    jac[0, IX_DX] = -sigma * li[0, 0]
    jac[0, IX_DY] = -sigma * li[0, 1]
    jac[1, IX_DX] = -sigma * li[1, 0]
    jac[1, IX_DY] = -sigma * li[1, 1]

    # d(Lambda^-1)/dtheta = R' D^-1 R^T + R D^-1 R'^T applied to the residual
    # R = [[c,-s],[s,c]], R' = [[-s,-c],[c,-s]]
    i1 = 1.0 / l1
    i2 = 1.0 / l2
    dth00 = 2.0 * c * s * (i2 - i1)
    dth01 = (c * c - s * s) * (i1 - i2)
    dth11 = 2.0 * c * s * (i1 - i2)
    jac[0, IX_TH] = dth00 * xt0 + dth01 * xt1
    jac[1, IX_TH] = dth01 * xt0 + dth11 * xt1

    # d(Lambda^-1)/dl1 = R diag(-1/l1^2, 0) R^T ; likewise for l2
    g1 = -1.0 / (l1 * l1)
    jac[0, IX_L1] = g1 * (c * c * xt0 + c * s * xt1)
    jac[1, IX_L1] = g1 * (c * s * xt0 + s * s * xt1)
    g2 = -1.0 / (l2 * l2)
    jac[0, IX_L2] = g2 * (s * s * xt0 - c * s * xt1)
    jac[1, IX_L2] = g2 * (-c * s * xt0 + c * c * xt1)

    return h, jac


@njit(cache=True)
def _cov_2norm_2x2(cov: np.ndarray) -> float:
    """Largest eigenvalue of the symmetric 2x2 position covariance block."""
    a = cov[0, 0]
    b = 0.5 * (cov[0, 1] + cov[1, 0])
    c = cov[1, 1]
    return 0.5 * (a + c) + math.hypot(0.5 * (a - c), b)


@njit(cache=True)
def _g_statistic_kernel(
    state: np.ndarray, buf_win: np.ndarray, count: int, beta: float
) -> Tuple[float, np.ndarray]:
    """Window statistic G and its 10-column gradient at the current state.

    buf_win rows are (rx, ry, sigma, covnorm) where (rx, ry) is a past
    event minus its predicted position and polarity offset at the time.
    Shape and orientation come from the current state, so every entry
    contributes to the theta/lambda gradient columns; all other columns
    are zero.
    """
    theta = state[IX_TH]
    l1 = state[IX_L1]
    l2 = state[IX_L2]
    c = math.cos(theta)
    s = math.sin(theta)
    li = _shape_matrix_inv(theta, l1, l2)
    i1 = 1.0 / l1
    i2 = 1.0 / l2
    dth00 = 2.0 * c * s * (i2 - i1)
    dth01 = (c * c - s * s) * (i1 - i2)
    dth11 = 2.0 * c * s * (i1 - i2)
    g1 = -1.0 / (l1 * l1)
    g2 = -1.0 / (l2 * l2)

    scale = 1.0 / ((1.0 + beta) * (1.0 + beta))
    g = 0.0
    row = np.zeros(STATE_DIM)
    for j in range(count):
        xt0 = buf_win[j, 0]
        xt1 = buf_win[j, 1]
        r0 = li[0, 0] * xt0 + li[0, 1] * xt1
        r1 = li[1, 0] * xt0 + li[1, 1] * xt1
        g += r0 * r0 + r1 * r1
        # d r / d theta
        row[IX_TH] += r0 * (dth00 * xt0 + dth01 * xt1) + r1 * (dth01 * xt0 + dth11 * xt1)
        # d r / d lambda
        row[IX_L1] += r0 * g1 * (c * c * xt0 + c * s * xt1) + r1 * g1 * (c * s * xt0 + s * s * xt1)
        row[IX_L2] += r0 * g2 * (s * s * xt0 - c * s * xt1) + r1 * g2 * (-c * s * xt0 + c * c * xt1)
    g *= scale
    for i in range(STATE_DIM):
        row[i] *= 2.0 * scale
    return g, row


@njit(cache=True)
def _update_kernel(
    state: np.ndarray,
    cov: np.ndarray,
    ex: float,
    ey: float,
    sigma: float,
    buf_win: np.ndarray,
    count: int,
    head: int,
    n: int,
    g_target_scale: float,
) -> Tuple[int, int, int]:
    """EKF measurement update; mutates state/cov/buffers.

    Returns (status, count, head) with the rotated buffer cursor.
    """
    h, c_h = _measurement_h_kernel(state, ex, ey, sigma)
    if not (math.isfinite(h[0]) and math.isfinite(h[1])):
        return UPDATE_DIVERGED, count, head
    dx0 = ex - state[IX_PX] - sigma * state[IX_DX]
    dy0 = ey - state[IX_PY] - sigma * state[IX_DY]
    covnorm0 = _cov_2norm_2x2(cov)

    if count < n:
        # window not full: H rows only
        m = 2
        c_mat = c_h
        y = np.empty(2)
        y[0] = -h[0]
        y[1] = -h[1]
        r_diag = np.ones(2)
    else:
        beta = 0.0
        cn_sum = 0.0
        for j in range(n):
            cn = buf_win[j, 3]
            cn_sum += cn
            if cn > beta:
                beta = cn
        g, g_row = _g_statistic_kernel(state, buf_win, n, beta)
        # The expectation of the scaled statistic is not 2n: the buffered
        # residuals carry the position uncertainty of their predictions
        # (roughly covnorm * tr(Lambda^-2) extra per entry) and the whole
        # sum is deflated by the beta scale.  Using the raw 2n target
        # while beta is large reads as "shape too narrow" and inflates
        # the axes during the spawn transient, then crashes them when
        # the early entries leave the window.  Track the expectation
        # instead, and fold its shape dependence into the Jacobian row.
        scale = 1.0 / ((1.0 + beta) * (1.0 + beta))
        l1 = state[IX_L1]
        l2 = state[IX_L2]
        itr = 1.0 / (l1 * l1) + 1.0 / (l2 * l2)
        g_row[IX_L1] += 2.0 * g_target_scale * scale * cn_sum / (l1 * l1 * l1)
        g_row[IX_L2] += 2.0 * g_target_scale * scale * cn_sum / (l2 * l2 * l2)
        m = 3
        c_mat = np.empty((3, STATE_DIM))
        c_mat[0, :] = c_h[0, :]
        c_mat[1, :] = c_h[1, :]
        c_mat[2, :] = g_row
        y = np.empty(3)
        y[0] = -h[0]
        y[1] = -h[1]
        y[2] = g_target_scale * scale * (2.0 * n + cn_sum * itr) - g
        r_diag = np.empty(3)
        r_diag[0] = 1.0
        r_diag[1] = 1.0
        r_diag[2] = 4.0 * n

    a = c_mat @ cov  # m x 10
    s_mat = a @ c_mat.T
    for i in range(m):
        s_mat[i, i] += r_diag[i]
    k = np.linalg.solve(s_mat, a).T  # 10 x m

    state += k @ y
    ikc = np.eye(STATE_DIM) - k @ c_mat
    new_cov = ikc @ cov @ ikc.T
    krk = (k * r_diag) @ k.T
    new_cov += krk
    for i in range(STATE_DIM):
        for j in range(STATE_DIM):
            cov[i, j] = 0.5 * (new_cov[i, j] + new_cov[j, i])

    state[IX_TH] = _wrap_theta(state[IX_TH])
    if state[IX_L1] < LAMBDA_FLOOR:
        state[IX_L1] = LAMBDA_FLOOR
    if state[IX_L2] < LAMBDA_FLOOR:
        state[IX_L2] = LAMBDA_FLOOR

    # enqueue this event's pre-update prediction residual for future windows
    buf_win[head, 0] = dx0
    buf_win[head, 1] = dy0
    buf_win[head, 2] = sigma
    buf_win[head, 3] = covnorm0
    head = (head + 1) % n
    if count < n:
        count += 1

    for i in range(STATE_DIM):
        if not math.isfinite(state[i]):
            return UPDATE_DIVERGED, count, head
        if not math.isfinite(cov[i, i]):
            return UPDATE_DIVERGED, count, head
    return UPDATE_OK, count, head


def measurement_g(state: np.ndarray, residuals: np.ndarray, beta: float = 0.0) -> float:
    """Window statistic: squared normalized residual norms under the
    current shape.  residuals is (n, 2) of event minus predicted position
    and polarity offset."""
    buf = _pack_window(residuals)
    g, _ = _g_statistic_kernel(np.asarray(state, dtype=np.float64), buf, len(buf), float(beta))
    return float(g)


def measurement_h(state: np.ndarray, ex: float, ey: float, sigma: int) -> np.ndarray:
    h, _ = _measurement_h_kernel(np.asarray(state, dtype=np.float64), float(ex), float(ey), float(sigma))
    return h


def jacobian_h(state: np.ndarray, ex: float, ey: float, sigma: int) -> np.ndarray:
    """Analytic 2x10 Jacobian of the H pseudo-measurement."""
    _, jac = _measurement_h_kernel(np.asarray(state, dtype=np.float64), float(ex), float(ey), float(sigma))
    return jac


def _pack_window(residuals: np.ndarray) -> np.ndarray:
    residuals = np.asarray(residuals, dtype=np.float64).reshape(-1, 2)
    buf = np.zeros((len(residuals), 4))
    buf[:, 0:2] = residuals
    return buf


def jacobian_g_fd(
    state: np.ndarray,
    residuals: np.ndarray,
    beta: float = 0.0,
    step: float = 1e-5,
) -> np.ndarray:
    """G row of the Jacobian by central finite differences.

    The buffered residuals are constants, so only the orientation and
    shape columns come out nonzero.
    """
    state = np.asarray(state, dtype=np.float64)
    row = np.empty(STATE_DIM)
    for i in range(STATE_DIM):
        zp = state.copy()
        zm = state.copy()
        zp[i] += step
        zm[i] -= step
        gp = measurement_g(zp, residuals, beta)
        gm = measurement_g(zm, residuals, beta)
        row[i] = (gp - gm) / (2.0 * step)
    return row


def jacobian_g(state: np.ndarray, residuals: np.ndarray, beta: float = 0.0) -> np.ndarray:
    """Analytic G row of the measurement Jacobian."""
    buf = _pack_window(residuals)
    _, row = _g_statistic_kernel(np.asarray(state, dtype=np.float64), buf, len(buf), float(beta))
    return row


def jacobians(
    state: np.ndarray,
    ex: float,
    ey: float,
    sigma: int,
    residuals: np.ndarray,
    beta: float = 0.0,
) -> np.ndarray:
    """Stacked 3x10 measurement Jacobian [C_H; C_G]."""
    _, c_h = _measurement_h_kernel(np.asarray(state, dtype=np.float64), float(ex), float(ey), float(sigma))
    out = np.empty((3, STATE_DIM))
    out[0:2, :] = c_h
    out[2, :] = jacobian_g(state, residuals, beta)
    return out


class AebFilter:
    """One blob tracker: state, covariance, and the G residual window."""

    def __init__(self, state: np.ndarray, cov: np.ndarray, t_us: int, config: FilterConfig = None):
        self.config = config or FilterConfig()
        self.state = np.asarray(state, dtype=np.float64).copy()
        self.cov = np.asarray(cov, dtype=np.float64).copy()
        self.t_us = int(t_us)
        n = self.config.n
        self.buf_win = np.zeros((n, 4))  # rx, ry, sigma, covnorm
        self.count = 0
        self.head = 0
        self.diverged = False

    @classmethod
    def spawn(cls, detection: Detection, config: FilterConfig = None) -> "AebFilter":
        """Initialize a filter from a detection: position, velocity, and an
        anisotropic shape prior aligned with the detected motion."""
        config = config or FilterConfig()
        d = detection.direction
        state = np.array(
            [
                float(detection.x), float(detection.y),
                detection.speed * d[0], detection.speed * d[1],
                _wrap_theta(math.atan2(d[1], d[0])), 0.0,
                config.spawn_lam[0], config.spawn_lam[1],
                config.spawn_delta_mag * d[0], config.spawn_delta_mag * d[1],
            ]
        )
        return cls(state, np.diag(config.p0_diag), detection.t, config)

    @property
    def window_full(self) -> bool:
        return self.count >= self.config.n

    @property
    def beta(self) -> float:
        if self.count == 0:
            return 0.0
        return float(self.buf_win[: self.count, 3].max())

    def predict(self, dt: float) -> None:
        if dt < 0:
            raise ValueError(f"negative prediction interval {dt}")
        _predict_kernel(self.state, self.cov, float(dt), self.config.q_diag)

    def update(self, event) -> int:
        status, self.count, self.head = _update_kernel(
            self.state,
            self.cov,
            float(event.x),
            float(event.y),
            float(event.polarity),
            self.buf_win,
            self.count,
            self.head,
            self.config.n,
            self.config.g_target_scale,
        )
        if status == UPDATE_DIVERGED:
            self.diverged = True
        return status

    def process(self, event) -> int:
        """Predict to the event time, then update."""
        dt = (event.t - self.t_us) * 1e-6
        self.predict(dt)
        self.t_us = event.t
        return self.update(event)
