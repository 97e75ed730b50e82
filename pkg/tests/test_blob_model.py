import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from blobtrack.blob_model import (
    BlobState,
    event_density,
    gate,
    gate_threshold,
    mahalanobis_sq,
    shape_matrix,
    wrap_theta,
)
from blobtrack.events import Event

from conftest import sample_blob_positions


def make_state(px=10.0, py=-4.0, theta=0.4, lam=(3.0, 1.5), delta=(1.0, 0.5)):
    return BlobState(
        p=np.array([px, py]),
        v=np.array([0.0, 0.0]),
        theta=theta,
        q=0.0,
        lam=np.array(lam),
        delta=np.array(delta),
    )


def test_shape_matrix_matches_rotation_construction(rng):
    for _ in range(200):
        theta = rng.uniform(-np.pi / 2, np.pi / 2)
        lam = rng.uniform(0.5, 8.0, size=2)
        c, s = np.cos(theta), np.sin(theta)
        r = np.array([[c, -s], [s, c]])
        expected = r @ np.diag(lam) @ r.T
        np.testing.assert_allclose(shape_matrix(theta, lam), expected, atol=1e-12)


def test_shape_matrix_rejects_nonpositive_axes():
    with pytest.raises(ValueError):
        shape_matrix(0.0, (0.0, 1.0))
    with pytest.raises(ValueError):
        shape_matrix(0.0, (2.0, -1.0))


def test_density_integrates_to_one():
    # quadrature oracle over a wide grid around the mode, sigma fixed
    state = make_state()
    xs = np.linspace(state.p[0] - 25, state.p[0] + 25, 201)
    ys = np.linspace(state.p[1] - 25, state.p[1] + 25, 201)
    dx = xs[1] - xs[0]
    total = 0.0
    for y in ys:
        for x in xs:
            z = state.as_vector()
            d2 = mahalanobis_sq(z, _ev(x, y, 1))
            total += math.exp(-0.5 * d2)
    total *= dx * dx / (2.0 * math.pi * state.lam[0] * state.lam[1])
    assert abs(total - 1.0) < 1e-3


class _Pt:
    def __init__(self, x, y, polarity):
        self.x = x
        self.y = y
        self.polarity = polarity


def _ev(x, y, polarity):
    return _Pt(x, y, polarity)


def test_density_peaks_at_polarity_shifted_mode():
    state = make_state()
    for sigma in (1, -1):
        mode = state.p + sigma * state.delta
        at_mode = event_density(state, _ev(mode[0], mode[1], sigma))
        nearby = event_density(state, _ev(mode[0] + 0.7, mode[1] - 0.4, sigma))
        assert at_mode > nearby
        # peak value is 1 / (2 pi det Lambda)
        assert at_mode == pytest.approx(1.0 / (2 * math.pi * state.lam[0] * state.lam[1]))


def test_mahalanobis_is_chi2_with_two_dof(rng):
    state = make_state()
    x, y, sigma = sample_blob_positions(rng, state, 4000)
    d2 = np.array(
        [mahalanobis_sq(state, _ev(x[i], y[i], int(sigma[i]))) for i in range(len(x))]
    )
    # chi-squared(2) is exponential(1/2): mean 2, median 2 ln 2
    assert abs(d2.mean() - 2.0) < 0.15
    assert abs(np.median(d2) - 2.0 * math.log(2.0)) < 0.15


def test_gate_threshold_closed_form():
    assert gate_threshold(0.95) == pytest.approx(5.9915, abs=1e-3)
    assert gate_threshold(0.5) == pytest.approx(-2.0 * math.log(0.5))
    for bad in (0.0, 1.0, -0.1, 1.7):
        with pytest.raises(ValueError):
            gate_threshold(bad)


def test_gate_accepts_below_and_rejects_above():
    thr = gate_threshold(0.95)
    assert gate(thr - 1e-9, 0.95)
    assert gate(thr, 0.95)
    assert not gate(thr + 1e-9, 0.95)


@given(st.floats(min_value=-50.0, max_value=50.0))
def test_wrap_theta_range_and_periodicity(theta):
    w = wrap_theta(theta)
    assert -math.pi / 2 < w <= math.pi / 2
    assert wrap_theta(theta + math.pi) == pytest.approx(w, abs=1e-9)


def test_wrap_theta_identity_inside_range():
    for theta in (-1.5, -0.3, 0.0, 0.7, math.pi / 2):
        assert wrap_theta(theta) == pytest.approx(theta)


def test_blob_state_vector_round_trip(rng):
    z = rng.standard_normal(10)
    z[6:8] = np.abs(z[6:8]) + 0.5
    state = BlobState.from_vector(z)
    np.testing.assert_allclose(state.as_vector(), z)
