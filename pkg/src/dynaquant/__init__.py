"""DynaQuant: content-aware quantization-aware training with dynamic bit-widths."""

from . import autodiff, cli, data, metrics, model, quant, selector, train  # noqa: F401
from .autodiff import Tensor  # noqa: F401
from .model import CoderConfig, Model  # noqa: F401
from .quant import DGM, STE, AffineQuantParams, fake_quantize  # noqa: F401
from .train import TrainConfig, Trainer  # noqa: F401

__version__ = "0.1.0"
