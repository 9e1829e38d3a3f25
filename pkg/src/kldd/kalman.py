"""Kalman-smoothed offset chains for deformable line kernels.

A 9-tap line kernel bends away from its center according to predicted
per-tap offsets. Accumulating raw offsets directly (the cumulative
mode) lets prediction errors compound toward the kernel ends; instead,
each side of the kernel can run a scalar Kalman recurrence that blends
every new offset against the running position:

    K_i = p_{i-1} / (p_{i-1} + r)
    x_i = x_{i-1} + K_i * delta_i
    p_i = (1 - K_i) * p_{i-1}

with measurement noise r, initial covariance p_0, and initial position
x_0. The gains depend only on (r, p_0, n), so they are precomputed
constants and backpropagation through positions is a fixed linear map.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import NumericError


class ChainMode(enum.Enum):
    """How raw per-tap offsets turn into tap positions."""

    CUMULATIVE = "cumulative"  # x_i = x_{i-1} + delta_i (all gains forced to 1)
    KALMAN = "kalman"


class Orientation(enum.Enum):
    """Axis a 9-tap line kernel extends along."""

    HORIZONTAL = "horizontal"  # taps step along columns, rows deform
    VERTICAL = "vertical"      # taps step along rows, columns deform


@dataclass(frozen=True)
class KalmanConfig:
    """Hyperparameters of the scalar Kalman recurrence."""

    r: float = 0.01
    p0: float = 1.0
    x0_rel: float = 0.0

    def validate(self) -> None:
        if self.r <= 0:
            raise ValueError(f"KalmanConfig.r must be > 0, got {self.r}")
        if self.p0 <= 0:
            raise ValueError(f"KalmanConfig.p0 must be > 0, got {self.p0}")


@dataclass(frozen=True)
class KalmanChain:
    """Gains, covariances, and smoothed positions for one kernel side."""

    gains: np.ndarray
    covariances: np.ndarray
    positions: np.ndarray


def kalman_gain_sequence(config: KalmanConfig, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Iterate the gain/covariance recurrence for n taps.

    Args:
        config: recurrence hyperparameters (r > 0, p0 > 0).
        n: number of taps on one side of the kernel center (>= 1).

    Returns:
        (gains, covariances), each of length n. Independent of any
        offset values.
    """
    if n <= 0:
        raise ValueError(f"kalman_gain_sequence: n must be >= 1, got {n}")
    config.validate()
    gains = np.empty(n)
    covs = np.empty(n)
    p = config.p0
    for i in range(n):
        k = p / (p + config.r)
        p = (1.0 - k) * p
        gains[i] = k
        covs[i] = p
    return gains, covs


def chain_gains(config: KalmanConfig, n: int, mode: ChainMode) -> np.ndarray:
    """Effective per-tap gains: the Kalman sequence, or all ones in cumulative mode."""
    if mode is ChainMode.CUMULATIVE:
        return np.ones(n)
    gains, _ = kalman_gain_sequence(config, n)
    return gains


def smooth_chain(deltas, config: KalmanConfig, mode: ChainMode) -> np.ndarray:
    """Turn raw offsets into smoothed positions relative to the kernel center.

    Args:
        deltas: raw offsets delta_1..delta_n for one side of the kernel.
        config: recurrence hyperparameters.
        mode: CUMULATIVE for plain prefix sums, KALMAN for gain-weighted steps.

    Returns:
        positions x_1..x_n with x_0 = config.x0_rel implied.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    if not np.all(np.isfinite(deltas)):
        raise NumericError("smooth_chain: non-finite delta")
    gains = chain_gains(config, len(deltas), mode)
    return config.x0_rel + np.cumsum(gains * deltas)


def build_chain(deltas, config: KalmanConfig, mode: ChainMode) -> KalmanChain:
    """smooth_chain plus the gain/covariance record, for inspection."""
    deltas = np.asarray(deltas, dtype=np.float64)
    gains, covs = kalman_gain_sequence(config, len(deltas))
    if mode is ChainMode.CUMULATIVE:
        gains = np.ones(len(deltas))
    positions = config.x0_rel + np.cumsum(gains * deltas)
    return KalmanChain(gains=gains, covariances=covs, positions=positions)


def tap_coordinates(
    anchor: tuple[int, int],
    orientation: Orientation,
    side_deltas: tuple,
    config: KalmanConfig,
    mode: ChainMode,
) -> list[tuple[float, float]]:
    """Absolute (row, col) coordinates of all 9 taps of a line kernel.

    The center tap sits exactly at the anchor. Tap j (j = -4..4) steps
    j cells along the kernel axis; its cross-axis coordinate follows
    the smoothed chain of the corresponding side. The two sides run
    independent chains, each starting from the center.

    Args:
        anchor: (row, col) of the center tap.
        orientation: HORIZONTAL (along columns) or VERTICAL (along rows).
        side_deltas: (negative_side[4], positive_side[4]) raw offsets,
            each ordered from the tap nearest the center outward.
        config: recurrence hyperparameters.
        mode: chain accumulation mode.

    Returns:
        9 (row, col) pairs ordered j = -4..4.
    """
    neg, pos = side_deltas
    neg_positions = smooth_chain(neg, config, mode)
    pos_positions = smooth_chain(pos, config, mode)
    row0, col0 = float(anchor[0]), float(anchor[1])
    taps = []
    for j in range(-4, 5):
        if j == 0:
            cross = 0.0
        elif j < 0:
            cross = neg_positions[-j - 1]
        else:
            cross = pos_positions[j - 1]
        if orientation is Orientation.HORIZONTAL:
            taps.append((row0 + cross, col0 + j))
        else:
            taps.append((row0 + j, col0 + cross))
    return taps
