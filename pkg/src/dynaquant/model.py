"""Toy learned-image-compression autoencoder hosting the quantization stack.

Three stride-2 conv stages down, three nearest-upsample+conv stages up.
The first module on each side runs under fixed 8-bit fake quantization and
its output feeds that side's bit-width selector; the remaining blocks are
DQ-Blocks. The latent is hard-rounded (straight-through in training) and its
rate is estimated by a factorized Gaussian model with learnable per-channel
mean and scale, a desk-scale stand-in for a real entropy model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .quant import GradientMode, STE
from .selector import (DQBlockState, Selection, SelectorState, dq_block_eval,
                       dq_block_forward, select_bits_detailed)

FIXED_FIRST_BITS = 8
LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class CoderConfig:
    """Architecture and quantization configuration of the toy coder."""

    stages: int = 3
    channels: tuple[int, ...] = (16, 32)       # widths after stages 1..stages-1
    latent_channels: int = 32
    bit_choices: tuple[int, ...] = (6, 8, 10)
    mode: GradientMode = STE
    fixed_bits: int | None = None              # set to disable the selector
    allow_padding: bool = True                 # pad-and-crop off-grid sizes

    def __post_init__(self):
        if self.stages < 2:
            raise ValueError(f"need at least 2 stages, got {self.stages}")
        if len(self.channels) != self.stages - 1:
            raise ValueError(
                f"{self.stages} stages need {self.stages - 1} channel widths, "
                f"got {self.channels}")

    @property
    def blocks_per_side(self) -> int:
        """Dynamically quantized blocks per coder side (first module is fixed)."""
        return self.stages - 1

    @property
    def branch_bits(self) -> tuple[int, ...]:
        if self.fixed_bits is not None:
            return (int(self.fixed_bits),)
        return tuple(self.bit_choices)

    @property
    def dynamic(self) -> bool:
        return self.fixed_bits is None


@dataclass
class LatentCode:
    """Rounded latent plus the source geometry needed to undo padding."""

    y_hat: Tensor                  # (batch, C_y, h, w), integer-valued
    source_hw: tuple[int, int]
    padded_hw: tuple[int, int]

    @property
    def batch(self) -> int:
        return self.y_hat.shape[0]

    @property
    def pixels_per_image(self) -> int:
        return self.source_hw[0] * self.source_hw[1]


class RateModel:
    """Factorized Gaussian over latent channels with learnable mean/scale."""

    SIGMA_FLOOR = 1e-6

    def __init__(self, latent_channels: int, dtype=ad.DEFAULT_DTYPE):
        self.mu = Tensor(np.zeros(latent_channels, dtype=dtype), requires_grad=True)
        # softplus(raw) = 1 at init
        raw = math.log(math.expm1(1.0))
        self.sigma_raw = Tensor(np.full(latent_channels, raw, dtype=dtype),
                                requires_grad=True)

    def sigma(self) -> Tensor:
        return ad.softplus(self.sigma_raw) + ad.tensor(
            np.asarray(self.SIGMA_FLOOR, dtype=self.sigma_raw.dtype))

    def parameters(self) -> list[Tensor]:
        return [self.mu, self.sigma_raw]


@dataclass
class CoderOutputs:
    """Per-call bookkeeping: selector outputs and executed-branch telemetry."""

    selection: Selection | None = None
    selected_bits: np.ndarray | None = None     # (batch, BL) integer bit-widths
    extras: dict = field(default_factory=dict)


def _he_conv(rng: np.random.Generator, out_ch: int, in_ch: int, k: int, dtype):
    fan_in = in_ch * k * k
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal((out_ch, in_ch, k, k)) * std).astype(dtype)


class Model:
    """Quantized toy autoencoder: encoder, decoder, selectors, rate model."""

    KERNEL = 3

    def __init__(self, config: CoderConfig, seed: int = 0, dtype=ad.DEFAULT_DTYPE):
        self.config = config
        self.mode = config.mode        # per-step override point (beta ramps)
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        k = self.KERNEL
        bits = config.branch_bits
        # dynamic runs pin the first modules at 8 bits; a fixed-bit run
        # quantizes every block, first included, at the one configured width
        fixed = (FIXED_FIRST_BITS,) if config.dynamic else bits

        enc_widths = [3, *config.channels, config.latent_channels]
        self.enc_blocks: list[DQBlockState] = []
        for i in range(config.stages):
            wdata = _he_conv(rng, enc_widths[i + 1], enc_widths[i], k, dtype)
            if i == config.stages - 1:
                # keep initial latents well above the rounding deadzone so the
                # decoder sees a live signal from step 0
                wdata *= 3.0
            w = Tensor(wdata, requires_grad=True)
            b = Tensor(np.zeros(enc_widths[i + 1], dtype=dtype), requires_grad=True)
            self.enc_blocks.append(DQBlockState(
                f"enc{i}", w, b, stride=2, padding=1,
                bit_choices=fixed if i == 0 else bits))

        dec_widths = [config.latent_channels, *reversed(config.channels), 3]
        self.dec_blocks: list[DQBlockState] = []
        for i in range(config.stages):
            w = Tensor(_he_conv(rng, dec_widths[i + 1], dec_widths[i], k, dtype),
                       requires_grad=True)
            b = Tensor(np.zeros(dec_widths[i + 1], dtype=dtype), requires_grad=True)
            self.dec_blocks.append(DQBlockState(
                f"dec{i}", w, b, stride=1, padding=1,
                bit_choices=fixed if i == 0 else bits, upsample=2))

        if config.dynamic:
            self.enc_selector = SelectorState(
                config.channels[0], config.blocks_per_side, bits, rng, dtype=dtype)
            self.dec_selector = SelectorState(
                config.channels[-1], config.blocks_per_side, bits, rng, dtype=dtype)
        else:
            self.enc_selector = None
            self.dec_selector = None

        self.rate_model = RateModel(config.latent_channels, dtype=dtype)
        self.calibrated = False

    # -- parameter inventory --------------------------------------------------

    def parameter_groups(self) -> list[tuple[str, Tensor]]:
        """Stable (name, tensor) inventory; checkpoint blobs follow this order."""
        out: list[tuple[str, Tensor]] = []
        for blk in self.enc_blocks + self.dec_blocks:
            out.append((f"{blk.name}.weight", blk.weight))
            out.append((f"{blk.name}.bias", blk.bias))
            for j, p in enumerate(blk.w_params):
                out.append((f"{blk.name}.w_quant{j}.s_raw", p.s_raw))
                out.append((f"{blk.name}.w_quant{j}.z", p.z))
            for j, p in enumerate(blk.x_params):
                out.append((f"{blk.name}.x_quant{j}.s_raw", p.s_raw))
                out.append((f"{blk.name}.x_quant{j}.z", p.z))
        for tag, sel in (("enc_selector", self.enc_selector),
                         ("dec_selector", self.dec_selector)):
            if sel is not None:
                out.append((f"{tag}.w1", sel.w1))
                out.append((f"{tag}.b1", sel.b1))
                out.append((f"{tag}.w2", sel.w2))
                out.append((f"{tag}.b2", sel.b2))
        out.append(("rate.mu", self.rate_model.mu))
        out.append(("rate.sigma_raw", self.rate_model.sigma_raw))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.parameter_groups()]

    # -- calibration ------------------------------------------------------------

    def calibrate(self, images: np.ndarray) -> None:
        """Initialize every quantizer's (s, z) from one float forward pass."""
        from .quant import recalibrate

        x = self._prepare(images)[0]
        a = Tensor(x)
        for blk in self.enc_blocks:
            blk.calibrate_input(a.data)
            for p in blk.w_params:
                recalibrate(p, blk.weight.data)
            a = self._activation(blk.float_forward(a), blk, side="enc")
        a = Tensor(ad.round_half_away(a.data))
        for blk in self.dec_blocks:
            blk.calibrate_input(a.data)
            for p in blk.w_params:
                recalibrate(p, blk.weight.data)
            a = self._activation(blk.float_forward(a), blk, side="dec")
        self.calibrated = True

    # -- forward ------------------------------------------------------------------

    def _prepare(self, images: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
        """Batch, cast and edge-pad H/W up to a multiple of 2^stages."""
        x = np.asarray(images)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != 3:
            raise ad.ShapeError(f"expected (batch, 3, H, W) images, got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        mult = 2 ** self.config.stages
        h, w = x.shape[2], x.shape[3]
        ph = (-h) % mult
        pw = (-w) % mult
        if ph or pw:
            if not self.config.allow_padding:
                raise ad.ShapeError(
                    f"image size {h}x{w} not divisible by {mult} and padding "
                    f"is disabled")
            x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
        return x, (h, w)

    def _activation(self, h: Tensor, blk: DQBlockState, side: str) -> Tensor:
        if side == "enc" and blk is self.enc_blocks[-1]:
            return h                       # latent layer stays linear
        if side == "dec" and blk is self.dec_blocks[-1]:
            return ad.clip(h, 0.0, 1.0)
        return ad.leaky_relu(h, LEAKY_SLOPE)

    def _run_side(self, a: Tensor, blocks: list[DQBlockState],
                  sel_state: SelectorState | None, side: str, train: bool,
                  rng: np.random.Generator | None) -> tuple[Tensor, CoderOutputs]:
        outputs = CoderOutputs()
        mode = self.mode
        a = self._activation(blocks[0].branch_forward(a, 0, mode), blocks[0], side)

        if self.config.dynamic:
            sel = select_bits_detailed(a, sel_state, train=train, rng=rng)
            outputs.selection = sel
            hard = sel.hard.data
            outputs.selected_bits = np.asarray(self.config.bit_choices)[
                np.argmax(hard, axis=-1)]
            for l, blk in enumerate(blocks[1:]):
                if train:
                    probs_l = sel.hard[:, l]
                    h = dq_block_forward(a, blk, probs_l, mode)
                else:
                    h = dq_block_eval(a, blk, np.argmax(hard[:, l], axis=-1), mode)
                a = self._activation(h, blk, side)
        else:
            for blk in blocks[1:]:
                a = self._activation(blk.branch_forward(a, 0, mode), blk, side)
        return a, outputs

    def encode(self, images, train: bool = False,
               rng: np.random.Generator | None = None) -> tuple[LatentCode, CoderOutputs]:
        """Image batch -> rounded latent plus encoder selector outputs."""
        x, source_hw = self._prepare(images)
        y, outputs = self._run_side(Tensor(x), self.enc_blocks, self.enc_selector,
                                    "enc", train, rng)
        if train:
            y_hat = ad.ste_round(y)
        else:
            y_hat = Tensor(ad.round_half_away(y.data))
        code = LatentCode(y_hat=y_hat, source_hw=source_hw,
                          padded_hw=(x.shape[2], x.shape[3]))
        return code, outputs

    def decode(self, code: LatentCode, train: bool = False,
               rng: np.random.Generator | None = None) -> tuple[Tensor, CoderOutputs]:
        """Latent code -> reconstruction in [0, 1], cropped to source size."""
        xhat, outputs = self._run_side(code.y_hat, self.dec_blocks,
                                       self.dec_selector, "dec", train, rng)
        h, w = code.source_hw
        if (h, w) != (xhat.shape[2], xhat.shape[3]):
            xhat = xhat[:, :, :h, :w]
        return xhat, outputs

    def estimate_rate(self, code: LatentCode) -> Tensor:
        """Mean bits per source pixel under the factorized Gaussian model."""
        y = code.y_hat
        c = y.shape[1]
        mu = ad.reshape(self.rate_model.mu, (1, c, 1, 1))
        sigma = ad.reshape(self.rate_model.sigma(), (1, c, 1, 1))
        half = ad.tensor(np.asarray(0.5, dtype=y.dtype))
        hi = ad.normal_cdf((y + half - mu) / sigma)
        lo = ad.normal_cdf((y - half - mu) / sigma)
        p = ad.clip(hi - lo, 1e-9, 1.0)
        total_bits = ad.sum_(-ad.log(p)) / ad.tensor(
            np.asarray(math.log(2.0), dtype=y.dtype))
        denom = code.batch * code.pixels_per_image
        return total_bits / ad.tensor(np.asarray(denom, dtype=y.dtype))


@dataclass(frozen=True)
class InventoryEntry:
    layer_id: str
    param_count: int
    source: str            # "fixed8" | "dynamic" | "fp32"
    bits: int | None       # concrete bits, None while dynamic/unbound


def model_bit_inventory(model: Model) -> list[InventoryEntry]:
    """Disjoint inventory covering every learnable parameter exactly once."""
    entries: list[InventoryEntry] = []
    for blk in model.enc_blocks + model.dec_blocks:
        dynamic = model.config.dynamic and blk.num_branches > 1
        source = "dynamic" if dynamic else "fixed"
        bits = None if dynamic else blk.bit_choices[0]
        entries.append(InventoryEntry(blk.name, blk.param_count(), source, bits))
        entries.append(InventoryEntry(f"{blk.name}.quant",
                                      blk.quant_param_count(), "fp32", 32))
    for tag, sel in (("enc_selector", model.enc_selector),
                     ("dec_selector", model.dec_selector)):
        if sel is not None:
            count = sum(p.size for p in sel.parameters())
            entries.append(InventoryEntry(tag, count, "fp32", 32))
    entries.append(InventoryEntry(
        "rate_model", sum(p.size for p in model.rate_model.parameters()),
        "fp32", 32))
    return entries
