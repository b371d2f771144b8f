"""Dynamic bit-width selection: a pool->MLP->Gumbel-Softmax head emitting a
one-hot bit-width choice per quantized block, and the DQ-Block that runs a
layer under its candidate bit-widths with probability-weighted fusion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .quant import AffineQuantParams, GradientMode, STE, calibrate_init, fake_quantize


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int, dtype) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, (fan_out, fan_in)).astype(dtype)


class SelectorState:
    """Weights and hyperparameters of one bit-width selector head.

    Architecture: AdaptivePool(5,5) -> flatten -> Linear(N*25 -> 128) ->
    Dropout(0.2) -> Linear(128 -> BL*M) -> Gumbel-Softmax(tau=1, hard).
    """

    POOL = (5, 5)
    HIDDEN = 128
    DROPOUT_P = 0.2

    def __init__(self, in_channels: int, num_blocks: int,
                 bit_choices: tuple[int, ...], rng: np.random.Generator,
                 tau: float = 1.0, hard: bool = True,
                 dtype=ad.DEFAULT_DTYPE):
        bits = tuple(int(b) for b in bit_choices)
        if len(bits) < 2 or len(set(bits)) != len(bits) or list(bits) != sorted(bits):
            raise ValueError(f"candidate bit set must be >=2 distinct ascending values, got {bit_choices}")
        if any(b < 2 for b in bits):
            raise ValueError(f"candidate bit-widths must be >= 2, got {bit_choices}")
        if not tau > 0:
            raise ValueError(f"temperature must be positive, got {tau}")
        self.in_channels = int(in_channels)
        self.num_blocks = int(num_blocks)
        self.bit_choices = bits
        self.tau = float(tau)
        self.hard = bool(hard)

        n_in = self.in_channels * self.POOL[0] * self.POOL[1]
        n_out = self.num_blocks * len(bits)
        self.w1 = Tensor(_glorot(rng, self.HIDDEN, n_in, dtype), requires_grad=True)
        self.b1 = Tensor(np.zeros(self.HIDDEN, dtype=dtype), requires_grad=True)
        self.w2 = Tensor(_glorot(rng, n_out, self.HIDDEN, dtype), requires_grad=True)
        self.b2 = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    @property
    def num_bits(self) -> int:
        return len(self.bit_choices)

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


def _one_hot_like(y: np.ndarray) -> np.ndarray:
    one_hot = np.zeros_like(y)
    np.put_along_axis(one_hot, np.argmax(y, axis=-1)[..., None], 1.0, axis=-1)
    return one_hot


# hard + y - stop_gradient(y), fused so the forward value is *exactly* one-hot
_harden = ad.register_custom_gradient(
    lambda y: (_one_hot_like(y), None),
    lambda g, ctx: (g,),
    name="hard_one_hot")


def gumbel_softmax(logits: Tensor, tau: float = 1.0, hard: bool = True,
                   rng: np.random.Generator | None = None) -> Tensor:
    """Differentiable categorical relaxation over the last axis.

    With `rng` given, standard Gumbel noise perturbs the logits; without it
    the draw is deterministic (noise-free). In hard mode the forward value is
    one-hot at the argmax while gradients flow as if the soft sample were
    returned (hard + y - stop_gradient(y)).
    """
    if not tau > 0:
        raise ValueError(f"gumbel_softmax: temperature must be positive, got {tau}")
    z = logits
    if rng is not None:
        noise = rng.gumbel(size=logits.shape).astype(logits.dtype)
        z = logits + Tensor(noise)
    y = ad.softmax(z / ad.tensor(np.asarray(tau, dtype=logits.dtype)), axis=-1)
    return _harden(y) if hard else y


@dataclass
class Selection:
    """Per-call selector output: one-hot choices plus the soft distribution."""
    hard: Tensor        # (batch, BL, M), rows one-hot in forward value
    soft: Tensor        # (batch, BL, M), pre-hard probabilities


def select_bits_detailed(activ: Tensor, state: SelectorState, train: bool,
                         rng: np.random.Generator | None = None) -> Selection:
    """Run the selector head; returns hard one-hot and soft probabilities."""
    if activ.data.ndim != 4 or activ.shape[1] != state.in_channels:
        raise ad.ShapeError(
            f"select_bits: expected (batch, {state.in_channels}, H, W), got {activ.shape}")
    batch = activ.shape[0]
    bl, m = state.num_blocks, state.num_bits

    pooled = ad.adaptive_avg_pool2d(activ, state.POOL)
    flat = ad.reshape(pooled, (batch, state.in_channels * 25))
    h = ad.linear(flat, state.w1, state.b1)
    h = ad.dropout(h, state.DROPOUT_P, train=train, rng=rng)
    logits = ad.linear(h, state.w2, state.b2)
    rows = ad.reshape(logits, (batch * bl, m))

    if train:
        soft = gumbel_softmax(rows, tau=state.tau, hard=False, rng=rng)
        hard = _harden(soft) if state.hard else soft
    else:
        soft = ad.softmax(rows / ad.tensor(np.asarray(state.tau, dtype=rows.dtype)),
                          axis=-1)
        hard = Tensor(_one_hot_like(soft.data))

    return Selection(hard=ad.reshape(hard, (batch, bl, m)),
                     soft=ad.reshape(soft, (batch, bl, m)))


def select_bits(activ: Tensor, state: SelectorState, train: bool,
                rng: np.random.Generator | None = None) -> Tensor:
    """One-hot bit-width choices of shape (batch, BL, M)."""
    return select_bits_detailed(activ, state, train, rng).hard


def effective_bits(probs: Tensor | np.ndarray, bit_choices) -> Tensor:
    """Expected bit-width sum_k p_k * b_k over the last axis."""
    t = probs if isinstance(probs, Tensor) else Tensor(np.asarray(probs))
    b = Tensor(np.asarray(bit_choices, dtype=t.dtype))
    return ad.sum_(t * b, axis=-1)


class DQBlockState:
    """A conv layer plus per-candidate-bit-width quantizer branches.

    Branch k quantizes both the layer input and the weight at bit_choices[k];
    weights are quantized per output channel, activations per channel.
    """

    def __init__(self, name: str, weight: Tensor, bias: Tensor,
                 stride: int, padding: int, bit_choices: tuple[int, ...],
                 upsample: int = 1):
        self.name = name
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.padding = padding
        self.bit_choices = tuple(int(b) for b in bit_choices)
        self.upsample = int(upsample)
        self.branches_executed = 0  # eval-path instrumentation

        in_ch = weight.shape[1]
        self.w_params: list[AffineQuantParams] = []
        self.x_params: list[AffineQuantParams] = []
        for b in self.bit_choices:
            self.w_params.append(calibrate_init(weight.data, b, channel_axis=0,
                                                dtype=weight.dtype))
            # activation range refined later by model calibration
            n_max = 2 ** b - 1
            s = np.full(in_ch, 2.0 / n_max)
            z = np.full(in_ch, n_max / 2.0)
            self.x_params.append(AffineQuantParams(
                Tensor(np.log(np.expm1(s)).astype(weight.dtype), requires_grad=True),
                Tensor(z.astype(weight.dtype), requires_grad=True),
                b, channel_axis=1))

    @property
    def num_branches(self) -> int:
        return len(self.bit_choices)

    def parameters(self) -> list[Tensor]:
        out = [self.weight, self.bias]
        for p in self.w_params + self.x_params:
            out.extend([p.s_raw, p.z])
        return out

    def param_count(self) -> int:
        return self.weight.size + self.bias.size

    def quant_param_count(self) -> int:
        return sum(p.s_raw.size + p.z.size for p in self.w_params + self.x_params)

    def calibrate_input(self, x: np.ndarray) -> None:
        from .quant import recalibrate
        for p in self.x_params:
            recalibrate(p, x)

    def branch_forward(self, x: Tensor, k: int, mode: GradientMode) -> Tensor:
        xq = fake_quantize(x, self.x_params[k], mode)
        if self.upsample > 1:
            xq = ad.nearest_upsample(xq, self.upsample)
        wq = fake_quantize(self.weight, self.w_params[k], mode)
        return ad.conv2d(xq, wq, self.bias, stride=self.stride, padding=self.padding)

    def float_forward(self, x: Tensor) -> Tensor:
        """Unquantized op, used only for calibration."""
        h = ad.nearest_upsample(x, self.upsample) if self.upsample > 1 else x
        return ad.conv2d(h, self.weight, self.bias,
                         stride=self.stride, padding=self.padding)


def dq_block_forward(x: Tensor, block: DQBlockState, probs: Tensor,
                     mode: GradientMode = STE) -> Tensor:
    """Probability-weighted fusion over every candidate branch.

    `probs` is (batch, M) or (M,). With hard one-hot rows the forward value
    equals the selected branch alone while gradients still reach the selector
    through the straight-through composition.
    """
    if probs.shape[-1] != block.num_branches:
        raise ValueError(f"dq_block_forward: {probs.shape[-1]} probabilities for "
                         f"{block.num_branches} branches")
    out = None
    for k in range(block.num_branches):
        branch = block.branch_forward(x, k, mode)
        if probs.data.ndim == 1:
            w = ad.reshape(probs[k], (1,) * branch.data.ndim)
        else:
            w = ad.reshape(probs[:, k], (branch.shape[0],) + (1,) * (branch.data.ndim - 1))
        term = branch * w
        out = term if out is None else out + term
    return out


def dq_block_eval(x: Tensor, block: DQBlockState, selection: np.ndarray,
                  mode: GradientMode = STE) -> Tensor:
    """Inference fast path: compute only the branches some sample selected.

    `selection` holds the chosen branch index per batch element.
    """
    selection = np.asarray(selection, dtype=np.int64).reshape(-1)
    if selection.shape[0] != x.shape[0]:
        raise ValueError(f"dq_block_eval: {selection.shape[0]} selections for "
                         f"batch {x.shape[0]}")
    out = None
    for k in np.unique(selection):
        branch = block.branch_forward(x, int(k), mode)
        block.branches_executed += 1
        mask = (selection == k).astype(branch.dtype)
        w = ad.reshape(Tensor(mask), (branch.shape[0],) + (1,) * (branch.data.ndim - 1))
        term = branch * w
        out = term if out is None else out + term
    return out
