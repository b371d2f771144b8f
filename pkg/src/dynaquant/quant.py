"""Asymmetric affine fake quantization with learnable per-channel scale and
zero-point, and a selectable backward rule for the rounding step.

The quantizer maps x -> round(clip(x/s + z, 0, 2^b - 1)) and dequantizes as
s * (x_q - z). Two gradient modes drive training:

* STE: round passes gradients through unchanged inside the clip range; the
  scale gradient follows the LSQ-style saturated-endpoint formulas.
* DGM: the round gradient is a smooth, strictly positive function of the
  distance to the nearest rounding boundary, peaked at half-integers. The
  emitted gradients are the exact analytic gradients of the soft-round
  surrogate network.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, round_half_away

logger = logging.getLogger(__name__)

SCALE_FLOOR = 1e-8
DEFAULT_BETA = 5.0


@dataclass(frozen=True)
class GradientMode:
    """Backward rule for the rounding step: 'ste' or 'dgm' with shape factor beta."""

    kind: str
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if self.kind not in ("ste", "dgm"):
            raise ValueError(f"gradient mode must be 'ste' or 'dgm', got {self.kind!r}")
        if self.kind == "dgm" and not self.beta > 0:
            raise ValueError(f"dgm shape factor beta must be positive, got {self.beta}")


STE = GradientMode("ste")


def DGM(beta: float = DEFAULT_BETA) -> GradientMode:
    return GradientMode("dgm", beta)


# -- gradient proxy -----------------------------------------------------------

def dgm_soft_round(u: np.ndarray, beta: float) -> np.ndarray:
    """Smooth surrogate of round: floor(u) + g(u - floor(u)).

    g maps [0, 1] onto [0, 1] with g(0)=0, g(0.5)=0.5, g(1)=1 for every beta,
    so the surrogate is continuous (and continuously differentiable) at
    integers.
    """
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    u = np.asarray(u, dtype=np.result_type(u, np.float32))
    fl = np.floor(u)
    t = u - fl
    g = 0.5 * np.tanh(beta * (t - 0.5)) / np.tanh(beta / 2.0) + 0.5
    return fl + g


def dgm_grad(t: np.ndarray, beta: float) -> np.ndarray:
    """Derivative of the soft-round proxy at fractional distance t in [0, 1).

    Strictly positive, maximal at t=0.5 and minimal toward the integers; the
    oscillation amplitude grows with beta.
    """
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    t = np.asarray(t)
    c = np.cosh(beta * (t - 0.5))
    return (beta / 2.0) / (c * c) / np.tanh(beta / 2.0)


# -- quantizer parameters -----------------------------------------------------

class AffineQuantParams:
    """Per-channel scale/zero-point for one b-bit unsigned quantizer branch.

    The scale is stored as an unconstrained tensor mapped through softplus,
    so any gradient step keeps the effective scale positive. The zero-point
    stays real-valued.
    """

    def __init__(self, s_raw: Tensor, z: Tensor, bits: int, channel_axis: int):
        if bits < 2:
            raise ValueError(f"bit-width must be >= 2, got {bits}")
        if s_raw.shape != z.shape or s_raw.data.ndim != 1:
            raise ad.ShapeError(
                f"scale/zero-point must be matching 1-D per-channel arrays, "
                f"got {s_raw.shape} and {z.shape}")
        self.s_raw = s_raw
        self.z = z
        self.bits = int(bits)
        self.channel_axis = int(channel_axis)

    @property
    def n_min(self) -> int:
        return 0

    @property
    def n_max(self) -> int:
        return 2 ** self.bits - 1

    @property
    def channels(self) -> int:
        return self.s_raw.shape[0]

    def scale(self) -> Tensor:
        """Effective positive scale on the tape."""
        return ad.softplus(self.s_raw) + ad.tensor(
            np.asarray(1e-12, dtype=self.s_raw.dtype))

    def scale_values(self) -> np.ndarray:
        return np.logaddexp(0.0, self.s_raw.data.astype(np.float64)) + 1e-12

    def set_learnable(self, learn_s: bool = True, learn_z: bool = True) -> None:
        self.s_raw.requires_grad = learn_s
        self.z.requires_grad = learn_z


def _channel_stats(x: np.ndarray, channel_axis: int) -> tuple[np.ndarray, np.ndarray]:
    moved = np.moveaxis(x, channel_axis, 0)
    flat = moved.reshape(moved.shape[0], -1).astype(np.float64)
    return flat.min(axis=1), flat.max(axis=1)


def _raw_from_scale(s: np.ndarray, dtype) -> np.ndarray:
    # inverse softplus, accounting for the 1e-12 positivity floor in scale()
    return np.log(np.expm1(np.maximum(s - 1e-12, 1e-13))).astype(dtype)


def calibrate_stats(mn: np.ndarray, mx: np.ndarray, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Min/max channel statistics -> (scale, zero_point) arrays."""
    span = mx - mn
    degenerate = span <= 0
    if np.any(degenerate):
        logger.warning("calibrate_init: %d constant channel(s), scale floored at %g",
                       int(degenerate.sum()), SCALE_FLOOR)
    s = np.maximum(span / (2 ** bits - 1), SCALE_FLOOR)
    z = -mn / s
    return s, z


def calibrate_init(x_batch: Tensor | np.ndarray, bits: int,
                   channel_axis: int = 1,
                   learnable: bool = True,
                   dtype=None) -> AffineQuantParams:
    """Initialize per-channel quantizer parameters from a data batch."""
    x = x_batch.data if isinstance(x_batch, Tensor) else np.asarray(x_batch)
    if x.size == 0:
        raise ValueError("calibrate_init: empty calibration batch")
    dtype = dtype or (x.dtype if x.dtype in (np.float32, np.float64) else ad.DEFAULT_DTYPE)
    mn, mx = _channel_stats(x, channel_axis)
    s, z = calibrate_stats(mn, mx, bits)
    params = AffineQuantParams(
        Tensor(_raw_from_scale(s, dtype), requires_grad=learnable),
        Tensor(z.astype(dtype), requires_grad=learnable),
        bits, channel_axis)
    return params


def recalibrate(params: AffineQuantParams, x_batch: Tensor | np.ndarray) -> None:
    """Overwrite (s, z) in place from fresh batch statistics."""
    x = x_batch.data if isinstance(x_batch, Tensor) else np.asarray(x_batch)
    mn, mx = _channel_stats(x, params.channel_axis)
    if mn.shape[0] != params.channels:
        raise ad.ShapeError(
            f"recalibrate: batch has {mn.shape[0]} channels on axis "
            f"{params.channel_axis}, params have {params.channels}")
    s, z = calibrate_stats(mn, mx, params.bits)
    params.s_raw.data = _raw_from_scale(s, params.s_raw.dtype)
    params.z.data = z.astype(params.z.dtype)


def _per_channel(v: np.ndarray, ndim: int, channel_axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[channel_axis] = v.shape[0]
    return v.reshape(shape)


def _check_channels(x_shape, params: AffineQuantParams, op: str) -> None:
    ax = params.channel_axis
    if ax >= len(x_shape) or x_shape[ax] != params.channels:
        raise ad.ShapeError(
            f"{op}: tensor shape {tuple(x_shape)} has no {params.channels}-channel "
            f"axis at {ax}")


# -- forward-only quantize / dequantize ----------------------------------------

def quantize(x: Tensor | np.ndarray, params: AffineQuantParams) -> Tensor:
    """Map real values to the integer grid [0, 2^b - 1]. Forward only."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    _check_channels(data.shape, params, "quantize")
    if not np.all(np.isfinite(data)):
        raise FloatingPointError("quantize: non-finite values in input")
    s = _per_channel(params.scale_values().astype(data.dtype), data.ndim,
                     params.channel_axis)
    z = _per_channel(params.z.data, data.ndim, params.channel_axis)
    u = data / s + z
    return Tensor(round_half_away(np.clip(u, params.n_min, params.n_max)))


def dequantize(x_q: Tensor | np.ndarray, params: AffineQuantParams) -> Tensor:
    """Recover real values s * (x_q - z) from grid integers."""
    data = x_q.data if isinstance(x_q, Tensor) else np.asarray(x_q)
    _check_channels(data.shape, params, "dequantize")
    if np.any(data < params.n_min) or np.any(data > params.n_max):
        raise ValueError(
            f"dequantize: values outside [{params.n_min}, {params.n_max}]")
    if not np.array_equal(data, np.round(data)):
        raise ValueError("dequantize: input must be integer-valued")
    s = _per_channel(params.scale_values().astype(data.dtype), data.ndim,
                     params.channel_axis)
    z = _per_channel(params.z.data, data.ndim, params.channel_axis)
    return Tensor(s * (data - z))


# -- fake quantization (tape op) ------------------------------------------------

def _fq_forward(x: np.ndarray, s: np.ndarray, z: np.ndarray, *,
                n_max: int, channel_axis: int, mode: GradientMode):
    sb = _per_channel(s, x.ndim, channel_axis)
    zb = _per_channel(z, x.ndim, channel_axis)
    u = x / sb + zb
    q = round_half_away(np.clip(u, 0.0, n_max))
    out = sb * (q - zb)
    ctx = (x, sb, zb, u, q, n_max, channel_axis, mode)
    return out.astype(x.dtype, copy=False), ctx


def _fq_backward(g: np.ndarray, ctx):
    x, sb, zb, u, q, n_max, channel_axis, mode = ctx
    in_range = (u >= 0.0) & (u <= n_max)

    if mode.kind == "ste":
        r = 1.0
        q_eff = q
    else:
        r = dgm_grad(u - np.floor(u), mode.beta)
        # exact surrogate gradient: the scale term sees the soft-round value
        q_eff = np.where(in_range, dgm_soft_round(u, mode.beta), q)

    rin = np.where(in_range, r, 0.0)
    dx = g * rin
    ds_full = g * ((q_eff - zb) - rin * x / sb)
    dz_full = g * sb * (rin - 1.0)

    reduce_axes = tuple(a for a in range(x.ndim) if a != channel_axis)
    ds = ds_full.sum(axis=reduce_axes).astype(x.dtype, copy=False)
    dz = dz_full.sum(axis=reduce_axes).astype(x.dtype, copy=False)
    return dx.astype(x.dtype, copy=False), ds, dz


_fq_op = ad.register_custom_gradient(_fq_forward, _fq_backward, name="fake_quantize")


def fake_quantize(x: Tensor, params: AffineQuantParams,
                  mode: GradientMode = STE) -> Tensor:
    """Quantize-dequantize pass-through with surrogate gradients.

    Forward equals dequantize(quantize(x)). Backward flows to x, to the
    effective scale (and on through softplus to the raw parameter) and to the
    zero-point; out-of-range elements receive the saturated-endpoint
    gradients so the clip range itself keeps learning.
    """
    _check_channels(x.shape, params, "fake_quantize")
    return _fq_op(x, params.scale(), params.z,
                  n_max=params.n_max, channel_axis=params.channel_axis, mode=mode)
