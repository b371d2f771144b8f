"""Joint optimization of coder weights, quantizer parameters and selectors
under loss = R + lambda*D + gamma*L_bits, with seeded reproducibility and a
binary checkpoint format.

Checkpoint layout (little-endian): magic "DQNT", format version u32, a
length-prefixed canonical-JSON block (config echo, step, Adam hyperparams,
metrics trace, parameter manifest), a u32 blob count, then length-prefixed
float32 blobs in inventory order (parameters, Adam first moments, Adam second
moments), and a trailing CRC32 over everything before it.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .model import CoderConfig, Model, model_bit_inventory
from .quant import DGM, STE, GradientMode
from .selector import effective_bits

CHECKPOINT_MAGIC = b"DQNT"
CHECKPOINT_VERSION = 1

# distortion enters the objective in 8-bit pixel units (255^2 * MSE of [0,1]
# images), the convention under which lambda grids like 0.0018..0.0932 span
# the 0.1-1.0 bpp regime
DISTORTION_SCALE = 255.0 ** 2


class TrainingError(RuntimeError):
    """Non-finite loss or gradients; carries the failing step index."""


class CheckpointIntegrityError(RuntimeError):
    """Checkpoint bytes are truncated or fail the CRC."""


class CheckpointVersionError(RuntimeError):
    """Checkpoint was written by an incompatible format version."""


class ConfigMismatchError(ValueError):
    """Checkpoint config differs from what the caller expected."""


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs: objective weights, schedule, model shape."""

    lambda_rd: float = 0.0067
    gamma: float = 0.001
    lr: float = 1e-4
    batch_size: int = 8
    crop: int = 64
    steps: int = 20_000
    seed: int = 1
    mode: str = "dgm"                  # "ste" | "dgm"
    beta: float = 5.0
    beta_ramp: tuple[float, float] | None = None   # optional linear schedule
    bit_choices: tuple[int, ...] = (6, 8, 10)
    fixed_bits: int | None = None
    stages: int = 3
    channels: tuple[int, ...] = (16, 32)
    latent_channels: int = 32
    learn_scale: bool = True
    learn_zero_point: bool = True
    calibration_steps: int = 16    # observer-style range tracking at the start

    def __post_init__(self):
        if not self.lambda_rd > 0:
            raise ValueError(f"lambda must be positive, got {self.lambda_rd}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.mode not in ("ste", "dgm"):
            raise ValueError(f"mode must be 'ste' or 'dgm', got {self.mode!r}")

    def gradient_mode(self, step: int = 0) -> GradientMode:
        if self.mode == "ste":
            return STE
        if self.beta_ramp is not None:
            lo, hi = self.beta_ramp
            frac = min(step / max(self.steps - 1, 1), 1.0)
            return DGM(lo + (hi - lo) * frac)
        return DGM(self.beta)

    def coder_config(self) -> CoderConfig:
        return CoderConfig(stages=self.stages, channels=tuple(self.channels),
                           latent_channels=self.latent_channels,
                           bit_choices=tuple(self.bit_choices),
                           mode=self.gradient_mode(0),
                           fixed_bits=self.fixed_bits)


def bits_loss(probs: Tensor, bit_choices) -> Tensor:
    """Expected average bit-width over (batch, L, M) soft probabilities."""
    if probs.data.ndim != 3 or probs.shape[1] < 1:
        raise ValueError(f"bits_loss: need (batch, L>=1, M) probabilities, "
                         f"got {probs.shape}")
    return ad.mean(effective_bits(probs, bit_choices))


def total_loss(rate, distortion, l_bits, lambda_rd: float, gamma: float):
    """R + lambda*D + gamma*L_bits on tensors (or plain floats)."""
    if isinstance(rate, Tensor):
        lam = ad.tensor(np.asarray(lambda_rd, dtype=rate.dtype))
        gam = ad.tensor(np.asarray(gamma, dtype=rate.dtype))
        return rate + lam * distortion + gam * l_bits
    return rate + lambda_rd * distortion + gamma * l_bits


@dataclass
class StepMetrics:
    step: int
    loss: float
    bpp: float
    mse: float
    psnr_db: float
    bits_loss: float
    avg_bits_selected: float

    def row(self) -> list:
        return [self.step, self.loss, self.bpp, self.mse, self.psnr_db,
                self.bits_loss, self.avg_bits_selected]

    HEADER = ["step", "loss", "bpp", "mse", "psnr_db", "bits_loss",
              "avg_bits_selected"]


class Trainer:
    """Owns model, optimizer, data sampler and the run's random generator."""

    def __init__(self, config: TrainConfig, dataset: np.ndarray | None = None,
                 _build_model: bool = True):
        self.config = config
        self.dataset = None if dataset is None else np.asarray(
            dataset, dtype=ad.DEFAULT_DTYPE)
        if self.dataset is not None and (self.dataset.ndim != 4
                                         or self.dataset.shape[1] != 3):
            raise ValueError(
                f"dataset must be (N, 3, H, W), got {None if dataset is None else self.dataset.shape}")
        self.rng = np.random.default_rng(config.seed)
        self.model = Model(config.coder_config(), seed=config.seed)
        if not (config.learn_scale and config.learn_zero_point):
            for blk in self.model.enc_blocks + self.model.dec_blocks:
                for p in blk.w_params + blk.x_params:
                    p.set_learnable(config.learn_scale, config.learn_zero_point)
        self.optimizer = Adam(self.model.parameters(), lr=config.lr)
        self.step_count = 0
        self.trace: list[StepMetrics] = []
        if self.dataset is not None:
            self.model.calibrate(self.dataset[: max(config.batch_size, 2)])

    # -- data ------------------------------------------------------------------

    def sample_batch(self) -> np.ndarray:
        if self.dataset is None:
            raise TrainingError("trainer has no dataset attached")
        n, _, h, w = self.dataset.shape
        crop = min(self.config.crop, h, w)
        idx = self.rng.integers(0, n, self.config.batch_size)
        out = np.empty((self.config.batch_size, 3, crop, crop),
                       dtype=self.dataset.dtype)
        for i, j in enumerate(idx):
            y0 = self.rng.integers(0, h - crop + 1)
            x0 = self.rng.integers(0, w - crop + 1)
            out[i] = self.dataset[j, :, y0:y0 + crop, x0:x0 + crop]
        return out

    # -- objective ---------------------------------------------------------------

    def forward_loss(self, batch: np.ndarray, train: bool = True):
        """One forward pass; returns (loss, parts) with tape intact."""
        self.model.mode = self.config.gradient_mode(self.step_count)
        rng = self.rng if train else None
        code, enc_out = self.model.encode(batch, train=train, rng=rng)
        rate = self.model.estimate_rate(code)
        recon, dec_out = self.model.decode(code, train=train, rng=rng)
        mse01 = ad.mse(recon, Tensor(batch))
        dist = mse01 * ad.tensor(np.asarray(DISTORTION_SCALE, dtype=mse01.dtype))

        if self.model.config.dynamic:
            soft = ad.concat([enc_out.selection.soft, dec_out.selection.soft],
                             axis=1)
            l_bits = bits_loss(soft, self.config.bit_choices)
            sel = np.concatenate([enc_out.selected_bits, dec_out.selected_bits],
                                 axis=1)
            avg_sel = float(sel.mean())
        else:
            l_bits = ad.tensor(np.asarray(0.0, dtype=rate.dtype))
            avg_sel = float(self.config.fixed_bits)
        loss = total_loss(rate, dist, l_bits, self.config.lambda_rd,
                          self.config.gamma)
        parts = {"rate": rate, "distortion": dist, "mse": mse01,
                 "bits_loss": l_bits, "avg_bits_selected": avg_sel,
                 "code": code, "recon": recon}
        return loss, parts

    def train_step(self, batch: np.ndarray | None = None) -> StepMetrics:
        if batch is None:
            batch = self.sample_batch()
        if self.step_count < self.config.calibration_steps:
            # quantizer ranges track the drifting activations before the
            # learnable (s, z) take over by gradient
            self.model.calibrate(batch)
        loss, parts = self.forward_loss(batch, train=True)
        if not np.isfinite(loss.data):
            raise TrainingError(f"non-finite loss at step {self.step_count}")
        ad.backward(loss)
        try:
            self.optimizer.step()
        except FloatingPointError as exc:
            raise TrainingError(f"{exc} at step {self.step_count}") from exc
        self.optimizer.zero_grad()

        mse_val = float(parts["mse"].data)
        metrics = StepMetrics(
            step=self.step_count,
            loss=float(loss.data),
            bpp=float(parts["rate"].data),
            mse=mse_val,
            psnr_db=float(10 * np.log10(1.0 / mse_val)) if mse_val > 0 else 100.0,
            bits_loss=float(parts["bits_loss"].data),
            avg_bits_selected=parts["avg_bits_selected"])
        self.trace.append(metrics)
        self.step_count += 1
        return metrics

    def run(self, steps: int | None = None, callback=None) -> list[StepMetrics]:
        steps = self.config.steps if steps is None else steps
        for _ in range(steps):
            m = self.train_step()
            if callback is not None and callback(m, self):
                break
        return self.trace


# -- evaluation -----------------------------------------------------------------

@dataclass
class EvalResult:
    per_image: list[dict]
    mean_bpp: float
    mean_psnr_db: float
    avg_bits_dynamic: float        # parameter-weighted over dynamic layers
    avg_bits_quantized: float      # parameter-weighted over all conv blocks
    bit_histogram: dict            # layer -> {bits: count over images}
    rd_loss: float                 # mean bpp + lambda * mean mse
    dynamic_layer_names: list[str] = field(default_factory=list)


def evaluate_model(model: Model, images: np.ndarray,
                   lambda_rd: float = 0.0067) -> EvalResult:
    """Deterministic eval pass, one image at a time."""
    from .metrics import psnr as psnr_fn

    inv = model_bit_inventory(model)
    dyn_entries = [e for e in inv if e.source == "dynamic"]
    conv_entries = [e for e in inv if e.source in ("fixed", "dynamic")]
    dyn_names = [e.layer_id for e in dyn_entries]

    per_image = []
    hist: dict[str, dict[int, int]] = {n: {} for n in dyn_names}
    mses = []
    for i in range(images.shape[0]):
        img = images[i:i + 1]
        code, enc_out = model.encode(img, train=False)
        rate = float(model.estimate_rate(code).data)
        recon, dec_out = model.decode(code, train=False)
        img_cmp = img.astype(np.float64)
        p = psnr_fn(img_cmp, recon.data)
        mses.append(float(np.mean((img_cmp - recon.data) ** 2)))

        bits_by_layer: dict[str, int] = {}
        if model.config.dynamic:
            enc_bits = enc_out.selected_bits[0]
            dec_bits = dec_out.selected_bits[0]
            for name, b in zip(dyn_names, list(enc_bits) + list(dec_bits)):
                bits_by_layer[name] = int(b)
                hist[name][int(b)] = hist[name].get(int(b), 0) + 1
        per_image.append({"index": i, "bpp": rate, "psnr_db": p,
                          "bits": bits_by_layer})

    mean_bpp = float(np.mean([r["bpp"] for r in per_image]))
    mean_psnr = float(np.mean([r["psnr_db"] for r in per_image]))

    if model.config.dynamic:
        dyn_weights = np.array([e.param_count for e in dyn_entries], dtype=np.float64)
        per_image_bits = np.array(
            [[r["bits"][n] for n in dyn_names] for r in per_image], dtype=np.float64)
        avg_dyn = float((per_image_bits @ dyn_weights).mean() / dyn_weights.sum())
        fixed_entries = [e for e in conv_entries if e.source == "fixed"]
        fixed_weighted = sum(e.param_count * e.bits for e in fixed_entries)
        fixed_count = sum(e.param_count for e in fixed_entries)
        avg_q = float(((per_image_bits @ dyn_weights).mean() + fixed_weighted)
                      / (dyn_weights.sum() + fixed_count))
    else:
        avg_dyn = float(model.config.fixed_bits)
        avg_q = float(sum(e.param_count * e.bits for e in conv_entries)
                      / sum(e.param_count for e in conv_entries))

    return EvalResult(per_image=per_image, mean_bpp=mean_bpp,
                      mean_psnr_db=mean_psnr, avg_bits_dynamic=avg_dyn,
                      avg_bits_quantized=avg_q, bit_histogram=hist,
                      rd_loss=mean_bpp + lambda_rd * DISTORTION_SCALE
                      * float(np.mean(mses)),
                      dynamic_layer_names=dyn_names)


# -- checkpointing ----------------------------------------------------------------

def _config_to_json(config: TrainConfig) -> dict:
    d = asdict(config)
    d["bit_choices"] = list(d["bit_choices"])
    d["channels"] = list(d["channels"])
    if d["beta_ramp"] is not None:
        d["beta_ramp"] = list(d["beta_ramp"])
    return d


def config_from_json(d: dict) -> TrainConfig:
    d = dict(d)
    d["bit_choices"] = tuple(d["bit_choices"])
    d["channels"] = tuple(d["channels"])
    if d.get("beta_ramp") is not None:
        d["beta_ramp"] = tuple(d["beta_ramp"])
    return TrainConfig(**d)


def save_checkpoint(trainer: Trainer, path: str | Path) -> None:
    """Serialize config, parameters and optimizer state; see module docstring."""
    params = trainer.model.parameter_groups()
    state = trainer.optimizer.state
    if not state.m:   # optimizer never stepped; write zero moments
        state.m = [np.zeros_like(p.data) for _, p in params]
        state.v = [np.zeros_like(p.data) for _, p in params]

    meta = {
        "config": _config_to_json(trainer.config),
        "step": trainer.step_count,
        "adam": {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2,
                 "eps": state.eps, "step": state.step},
        "manifest": [{"name": n, "shape": list(t.shape)} for n, t in params],
        "trace": [m.row() for m in trainer.trace],
        "trace_header": StepMetrics.HEADER,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()

    blobs: list[np.ndarray] = [t.data for _, t in params]
    blobs += state.m + state.v

    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    buf += struct.pack("<I", len(meta_bytes))
    buf += meta_bytes
    buf += struct.pack("<I", len(blobs))
    for arr in blobs:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        buf += struct.pack("<I", len(raw))
        buf += raw
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointIntegrityError(
                f"checkpoint truncated reading {what} at offset {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path: str | Path, dataset: np.ndarray | None = None,
                    expected_config: TrainConfig | None = None) -> Trainer:
    """Rebuild a trainer from checkpoint bytes; round-trips bit-exactly."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise CheckpointIntegrityError(
            f"checkpoint truncated reading header at offset {len(raw)}")
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    actual_crc = zlib.crc32(raw[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CheckpointIntegrityError(
            f"checkpoint CRC mismatch at offset {len(raw) - 4}: "
            f"stored {stored_crc:#010x}, computed {actual_crc:#010x}")

    r = _Reader(raw[:-4])
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointIntegrityError("bad magic bytes, not a checkpoint file")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    meta = json.loads(r.take(r.u32("meta length"), "meta block").decode())
    config = config_from_json(meta["config"])
    if expected_config is not None and config != expected_config:
        diffs = [k for k in _config_to_json(config)
                 if _config_to_json(config)[k] != _config_to_json(expected_config)[k]]
        raise ConfigMismatchError(
            f"checkpoint config differs from expected in fields: {diffs}")

    n_blobs = r.u32("blob count")
    blobs = []
    for i in range(n_blobs):
        size = r.u32(f"blob {i} length")
        blobs.append(np.frombuffer(r.take(size, f"blob {i}"), dtype="<f4"))

    trainer = Trainer(config, dataset=dataset)
    params = trainer.model.parameter_groups()
    manifest = meta["manifest"]
    if len(manifest) != len(params) or n_blobs != 3 * len(params):
        raise ConfigMismatchError(
            f"checkpoint holds {len(manifest)} parameters, model has {len(params)}")
    for (name, tensor), entry, blob in zip(params, manifest, blobs[:len(params)]):
        if name != entry["name"] or list(tensor.shape) != entry["shape"]:
            raise ConfigMismatchError(
                f"parameter mismatch: checkpoint {entry['name']}{entry['shape']} "
                f"vs model {name}{list(tensor.shape)}")
        tensor.data = blob.reshape(tensor.shape).astype(ad.DEFAULT_DTYPE).copy()

    adam = meta["adam"]
    state = trainer.optimizer.state
    state.lr, state.beta1, state.beta2 = adam["lr"], adam["beta1"], adam["beta2"]
    state.eps, state.step = adam["eps"], adam["step"]
    n = len(params)
    state.m = [b.reshape(p.shape).astype(ad.DEFAULT_DTYPE).copy()
               for b, (_, p) in zip(blobs[n:2 * n], params)]
    state.v = [b.reshape(p.shape).astype(ad.DEFAULT_DTYPE).copy()
               for b, (_, p) in zip(blobs[2 * n:], params)]

    trainer.step_count = meta["step"]
    trainer.trace = [StepMetrics(*row) for row in meta["trace"]]
    trainer.model.calibrated = True   # (s, z) restored from the blobs
    return trainer
