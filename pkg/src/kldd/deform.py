"""Line-kernel deformable convolution.

A layer predicts per-pixel offsets with a small standard convolution,
bounds them with a tanh squash, smooths each side of the kernel through
the gain chain from :mod:`kldd.kalman`, samples its input at the nine
deformed taps, and contracts the gathered values against learned tap
weights. Horizontal layers walk their taps along columns and deform
rows; vertical layers do the opposite.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kalman import ChainMode, KalmanConfig, Orientation, chain_gains, tap_coordinates

KERNEL_TAPS = 9
SIDE_TAPS = KERNEL_TAPS // 2


class LinearDeformableLayer:
    """One-orientation deformable line convolution.

    Attributes:
        orientation: walk/deform axis assignment.
        pred_w, pred_b: 3x3 offset-predictor convolution, c_in -> 8 channels.
            Channels 0..3 are the negative-side deltas ordered from the tap
            nearest the center outward; channels 4..7 are the positive side.
        tap_w: (c_out, c_in, 9) tap weights; slot k applies to tap j = k - 4.
        bias: (c_out,) output bias.
        chain_mode: CUMULATIVE or KALMAN accumulation of the deltas.
        kalman: recurrence hyperparameters for the gain sequence.
        max_offset: bound on each raw delta in pixels.
    """

    def __init__(
        self,
        orientation: Orientation,
        pred_w: Tensor,
        pred_b: Tensor,
        tap_w: Tensor,
        bias: Tensor,
        chain_mode: ChainMode = ChainMode.KALMAN,
        kalman: KalmanConfig = KalmanConfig(),
        max_offset: float = 3.0,
    ):
        if pred_w.ndim != 4 or pred_w.shape[0] != 2 * SIDE_TAPS:
            raise ValueError("offset predictor must output 8 channels")
        if tap_w.ndim != 3 or tap_w.shape[2] != KERNEL_TAPS:
            raise ValueError("tap weights must have 9 taps on the last axis")
        if tap_w.shape[1] != pred_w.shape[1]:
            raise ValueError("tap weights and offset predictor disagree on input channels")
        if bias.shape != (tap_w.shape[0],):
            raise ValueError("bias must have one entry per output channel")
        if max_offset <= 0:
            raise ValueError("max_offset must be positive")
        self.orientation = orientation
        self.pred_w = pred_w
        self.pred_b = pred_b
        self.tap_w = tap_w
        self.bias = bias
        self.chain_mode = chain_mode
        self.kalman = kalman
        self.max_offset = float(max_offset)

    @property
    def c_in(self) -> int:
        return self.tap_w.shape[1]

    @property
    def c_out(self) -> int:
        return self.tap_w.shape[0]

    def params(self) -> dict[str, Tensor]:
        return {
            "pred_w": self.pred_w,
            "pred_b": self.pred_b,
            "tap_w": self.tap_w,
            "bias": self.bias,
        }


def init_linear_deformable(
    rng: np.random.Generator,
    c_in: int,
    c_out: int,
    orientation: Orientation,
    chain_mode: ChainMode = ChainMode.KALMAN,
    kalman: KalmanConfig = KalmanConfig(),
    max_offset: float = 3.0,
) -> LinearDeformableLayer:
    """Fresh layer: zero offset predictor, He-scaled tap weights.

    The zero predictor makes the layer start as an exact straight-line
    convolution; deformation only appears as the predictor trains.
    """
    pred_w = Tensor(np.zeros((2 * SIDE_TAPS, c_in, 3, 3)), requires_grad=True)
    pred_b = Tensor(np.zeros(2 * SIDE_TAPS), requires_grad=True)
    std = np.sqrt(2.0 / (c_in * KERNEL_TAPS))
    tap_w = Tensor(rng.normal(0.0, std, size=(c_out, c_in, KERNEL_TAPS)), requires_grad=True)
    bias = Tensor(np.zeros(c_out), requires_grad=True)
    return LinearDeformableLayer(
        orientation, pred_w, pred_b, tap_w, bias, chain_mode, kalman, max_offset
    )


def predict_offsets(layer: LinearDeformableLayer, x: Tensor) -> Tensor:
    """Bounded per-pixel deltas, (8,h,w) for a (c_in,h,w) input (batch ok)."""
    raw = ad.conv2d(x, layer.pred_w, layer.pred_b, stride=1, pad=1)
    return ad.scale(ad.tanh(raw), layer.max_offset)


def _side_positions(layer: LinearDeformableLayer, deltas: Tensor) -> tuple[Tensor, Tensor]:
    """Chain each side of (N,8,H,W) deltas into cross-axis tap positions."""
    gains = chain_gains(layer.kalman, SIDE_TAPS, layer.chain_mode)
    neg = ad.cumsum_ch(ad.mul_channel_const(ad.slice_ch(deltas, 0, SIDE_TAPS), gains))
    pos = ad.cumsum_ch(ad.mul_channel_const(ad.slice_ch(deltas, SIDE_TAPS, 2 * SIDE_TAPS), gains))
    if layer.kalman.x0_rel != 0.0:
        neg = ad.add_scalar(neg, layer.kalman.x0_rel)
        pos = ad.add_scalar(pos, layer.kalman.x0_rel)
    return neg, pos


def _tap_cross_coords(layer: LinearDeformableLayer, deltas: Tensor) -> Tensor:
    """Absolute deform-axis coordinates for all 9 taps, (N,9,H,W).

    Tap order is j = -4..4: the negative chain reversed (outermost tap
    first), the undeformed center, then the positive chain.
    """
    n, _, h, w = deltas.shape
    neg, pos = _side_positions(layer, deltas)
    center = Tensor(np.zeros((n, 1, h, w)))
    cross = ad.concat_ch([ad.reverse_ch(neg), center, pos])
    extent = h if layer.orientation is Orientation.HORIZONTAL else w
    axis_index = np.arange(extent, dtype=np.float64)
    if layer.orientation is Orientation.HORIZONTAL:
        base = np.broadcast_to(axis_index[None, None, :, None], (n, KERNEL_TAPS, h, w))
    else:
        base = np.broadcast_to(axis_index[None, None, None, :], (n, KERNEL_TAPS, h, w))
    return ad.add(cross, Tensor(np.ascontiguousarray(base)))


def ld_forward(layer: LinearDeformableLayer, x: Tensor) -> Tensor:
    """Deformable line convolution of (c_in,h,w) or (N,c_in,h,w) input."""
    squeeze = x.ndim == 3
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != layer.c_in:
        raise ValueError(f"ld_forward: expected {layer.c_in} input channels, got {x.shape}")
    deltas = predict_offsets(layer, x)
    coord = _tap_cross_coords(layer, deltas)
    shifts = np.arange(-SIDE_TAPS, SIDE_TAPS + 1)
    axis = "row" if layer.orientation is Orientation.HORIZONTAL else "col"
    gathered = ad.line_gather(x, coord, shifts, axis)
    out = ad.tap_contract(gathered, layer.tap_w, layer.bias)
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
    return out


def receptive_field(
    layer: LinearDeformableLayer, x: Tensor, position: tuple[int, int]
) -> list[tuple[float, float]]:
    """The 9 (row, col) sample points the forward pass uses at one position.

    Coordinates are pre-clamp: points may fall outside the image near the
    border, where the gather would clamp them. Ordered j = -4..4.
    """
    if x.ndim == 3:
        data = x.data[None]
    elif x.ndim == 4:
        data = x.data[:1]
    else:
        raise ValueError("receptive_field expects a (c_in,h,w) or (N,c_in,h,w) input")
    _, _, h, w = data.shape
    row, col = position
    if not (0 <= row < h and 0 <= col < w):
        raise ValueError(f"position {position} outside {h}x{w} grid")
    with ad.no_grad():
        deltas = predict_offsets(layer, Tensor(data)).data[0, :, row, col]
    return tap_coordinates(
        (row, col),
        layer.orientation,
        (deltas[:SIDE_TAPS], deltas[SIDE_TAPS:]),
        layer.kalman,
        layer.chain_mode,
    )


class PairedDeformableBlock:
    """Horizontal and vertical deformable convs side by side.

    Each orientation produces half the output channels; the two results
    are concatenated so downstream layers see both vessel directions.
    """

    def __init__(self, horizontal: LinearDeformableLayer, vertical: LinearDeformableLayer):
        if horizontal.orientation is not Orientation.HORIZONTAL:
            raise ValueError("first layer must be horizontal")
        if vertical.orientation is not Orientation.VERTICAL:
            raise ValueError("second layer must be vertical")
        if horizontal.c_in != vertical.c_in:
            raise ValueError("paired layers must share input channels")
        self.horizontal = horizontal
        self.vertical = vertical

    @property
    def c_out(self) -> int:
        return self.horizontal.c_out + self.vertical.c_out

    def params(self) -> dict[str, Tensor]:
        named = {}
        for prefix, layer in (("h", self.horizontal), ("v", self.vertical)):
            for key, t in layer.params().items():
                named[f"{prefix}.{key}"] = t
        return named


def init_paired_block(
    rng: np.random.Generator,
    c_in: int,
    c_out: int,
    chain_mode: ChainMode = ChainMode.KALMAN,
    kalman: KalmanConfig = KalmanConfig(),
    max_offset: float = 3.0,
) -> PairedDeformableBlock:
    if c_out % 2 != 0:
        raise ValueError("paired block needs an even channel count")
    half = c_out // 2
    h = init_linear_deformable(rng, c_in, half, Orientation.HORIZONTAL, chain_mode, kalman, max_offset)
    v = init_linear_deformable(rng, c_in, half, Orientation.VERTICAL, chain_mode, kalman, max_offset)
    return PairedDeformableBlock(h, v)


def paired_forward(block: PairedDeformableBlock, x: Tensor) -> Tensor:
    squeeze = x.ndim == 3
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    out = ad.concat_ch([ld_forward(block.horizontal, x), ld_forward(block.vertical, x)])
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
    return out
