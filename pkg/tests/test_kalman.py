"""Offset-chain tests: gain recurrence values, smoothing semantics, and
tap geometry."""

import numpy as np
import pytest

from kldd.errors import NumericError
from kldd.kalman import (
    ChainMode,
    KalmanConfig,
    Orientation,
    build_chain,
    kalman_gain_sequence,
    smooth_chain,
    tap_coordinates,
)

# iterating K_i = p/(p+r), p' = (1-K)p from r=0.01, p0=1 by hand
EXPECTED_GAINS = [0.990099009900990, 0.497512437810945, 0.332225913621262, 0.249376558603491]
# positions for unit deltas are the cumulative sums of the gains
EXPECTED_UNIT_POSITIONS = [0.990099009900990, 1.487611447711935, 1.819837361333197, 2.069213919936688]


def reference_chain(deltas, r, p0, x0):
    """Independent recurrence implementation used as the oracle."""
    p, x = p0, x0
    out = []
    for d in deltas:
        k = p / (p + r)
        x = x + k * d
        p = (1.0 - k) * p
        out.append(x)
    return np.array(out)


def test_gain_sequence_values():
    gains, covs = kalman_gain_sequence(KalmanConfig(), 4)
    np.testing.assert_allclose(gains, EXPECTED_GAINS, atol=1e-12)
    # covariance follows p_i = (1-K_i) p_{i-1}
    p = 1.0
    for k, c in zip(gains, covs):
        p = (1.0 - k) * p
        assert abs(c - p) <= 1e-15


def test_gain_limit_large_r():
    gains, _ = kalman_gain_sequence(KalmanConfig(r=1e9), 1)
    assert gains[0] < 1e-8


def test_covariance_strictly_decreasing():
    gains, covs = kalman_gain_sequence(KalmanConfig(), 6)
    assert np.all(np.diff(covs) < 0)
    assert covs[-1] < covs[0]
    assert np.all((0 < gains) & (gains <= 1))


def test_gain_sequence_errors():
    with pytest.raises(ValueError):
        kalman_gain_sequence(KalmanConfig(), 0)
    with pytest.raises(ValueError):
        kalman_gain_sequence(KalmanConfig(r=0.0), 3)
    with pytest.raises(ValueError):
        kalman_gain_sequence(KalmanConfig(p0=-1.0), 3)


def test_smooth_chain_zero_and_prefix():
    cfg = KalmanConfig()
    np.testing.assert_array_equal(smooth_chain([0, 0, 0, 0], cfg, ChainMode.KALMAN), 0.0)
    np.testing.assert_array_equal(smooth_chain([0, 0, 0, 0], cfg, ChainMode.CUMULATIVE), 0.0)
    np.testing.assert_array_equal(
        smooth_chain([1, 1, 1, 1], cfg, ChainMode.CUMULATIVE), [1, 2, 3, 4]
    )


def test_smooth_chain_unit_deltas():
    got = smooth_chain([1, 1, 1, 1], KalmanConfig(), ChainMode.KALMAN)
    np.testing.assert_allclose(got, EXPECTED_UNIT_POSITIONS, atol=1e-12)


def test_smooth_chain_matches_reference_recurrence():
    rng = np.random.default_rng(0)
    cfg = KalmanConfig()
    for _ in range(200):
        deltas = rng.uniform(-3, 3, size=rng.integers(1, 9))
        got = smooth_chain(deltas, cfg, ChainMode.KALMAN)
        want = reference_chain(deltas, cfg.r, cfg.p0, cfg.x0_rel)
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_smooth_chain_rejects_nonfinite():
    with pytest.raises(NumericError):
        smooth_chain([1.0, np.nan], KalmanConfig(), ChainMode.KALMAN)


def test_step_size_never_overshoots_raw_offset():
    rng = np.random.default_rng(1)
    cfg = KalmanConfig()
    for _ in range(100):
        deltas = rng.uniform(-3, 3, size=6)
        pos = smooth_chain(deltas, cfg, ChainMode.KALMAN)
        steps = np.diff(np.concatenate([[cfg.x0_rel], pos]))
        assert np.all(np.abs(steps) <= np.abs(deltas) + 1e-15)


def test_gain_limit_as_r_vanishes():
    # As r -> 0 the first gain tends to 1, so the first tap agrees with the
    # cumulative chain. Later gains cannot follow: p collapses to order r
    # after one update (p1 = r*p0/(p0+r)), which pins K_i near 1/i. Both
    # halves of that limit are checked here.
    assert abs(kalman_gain_sequence(KalmanConfig(r=1e-12), 1)[0][0] - 1.0) <= 1e-9

    # r = 1e-8 ~ sqrt(double eps) keeps the cancellation in (1 - K_1) from
    # swamping the O(r) distance to the limit.
    cfg = KalmanConfig(r=1e-8)
    gains, _ = kalman_gain_sequence(cfg, 8)
    harmonic = 1.0 / np.arange(1, 9)
    assert np.max(np.abs(gains - harmonic)) <= 1e-6

    rng = np.random.default_rng(2)
    for _ in range(50):
        deltas = rng.uniform(-2, 2, size=8)
        k = smooth_chain(deltas, cfg, ChainMode.KALMAN)
        c = smooth_chain(deltas, cfg, ChainMode.CUMULATIVE)
        assert abs(k[0] - c[0]) <= 1e-6
        np.testing.assert_allclose(k, np.cumsum(harmonic * deltas), atol=1e-6)


def test_gains_independent_of_deltas():
    cfg = KalmanConfig()
    a = build_chain([1.0, -2.0, 0.5, 3.0], cfg, ChainMode.KALMAN)
    b = build_chain([0.0, 0.0, 0.0, 0.0], cfg, ChainMode.KALMAN)
    np.testing.assert_array_equal(a.gains, b.gains)
    np.testing.assert_array_equal(a.covariances, b.covariances)


def test_smooth_chain_linearity():
    rng = np.random.default_rng(3)
    cfg = KalmanConfig()
    deltas = rng.uniform(-1, 1, size=5)
    for a in (0.0, -2.0, 3.5):
        got = smooth_chain(a * deltas, cfg, ChainMode.KALMAN)
        want = a * smooth_chain(deltas, cfg, ChainMode.KALMAN)
        np.testing.assert_allclose(got, want, atol=1e-13)


def test_tap_coordinates_straight_lines():
    cfg = KalmanConfig()
    zeros = (np.zeros(4), np.zeros(4))
    h = tap_coordinates((5, 5), Orientation.HORIZONTAL, zeros, cfg, ChainMode.KALMAN)
    assert h == [(5.0, float(c)) for c in range(1, 10)]
    v = tap_coordinates((5, 5), Orientation.VERTICAL, zeros, cfg, ChainMode.KALMAN)
    assert v == [(float(r), 5.0) for r in range(1, 10)]


def test_tap_coordinates_positive_side_unit_deltas():
    cfg = KalmanConfig()
    deltas = (np.zeros(4), np.ones(4))
    taps = tap_coordinates((5, 5), Orientation.HORIZONTAL, deltas, cfg, ChainMode.KALMAN)
    assert taps[4] == (5.0, 5.0)  # center tap is the anchor
    pos_rows = [taps[5 + i][0] for i in range(4)]
    np.testing.assert_allclose(pos_rows, 5.0 + np.asarray(EXPECTED_UNIT_POSITIONS), atol=1e-12)
    # negative side stays straight
    assert all(taps[i][0] == 5.0 for i in range(4))


def test_tap_coordinates_sides_are_independent():
    cfg = KalmanConfig()
    deltas = (np.array([1.0, 1.0, 1.0, 1.0]), np.array([-1.0, -1.0, -1.0, -1.0]))
    taps = tap_coordinates((4, 4), Orientation.VERTICAL, deltas, cfg, ChainMode.KALMAN)
    neg_cols = np.array([taps[3 - i][1] for i in range(4)])  # j = -1..-4
    pos_cols = np.array([taps[5 + i][1] for i in range(4)])  # j = +1..+4
    np.testing.assert_allclose(neg_cols - 4.0, EXPECTED_UNIT_POSITIONS, atol=1e-12)
    np.testing.assert_allclose(pos_cols - 4.0, -np.asarray(EXPECTED_UNIT_POSITIONS), atol=1e-12)
