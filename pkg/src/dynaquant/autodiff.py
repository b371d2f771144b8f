"""Minimal reverse-mode autodiff engine on dense numpy tensors.

Forward ops build a tape of `Tensor` nodes; `backward()` walks the tape in
reverse topological order exactly once per node and accumulates analytic
gradients into every reachable tensor with ``requires_grad=True``.

Training runs in float32 by default; gradient-check tests pass float64
arrays explicitly and everything propagates in the input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit as _sigmoid
from scipy.special import ndtr as _ndtr

DEFAULT_DTYPE = np.float32

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes do not conform to the op's rules."""


class GradientContractError(RuntimeError):
    """A backward rule produced gradients violating its contract."""


class Tensor:
    """Dense n-dimensional array participating in a reverse-mode tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_rule", "_op",
                 "_n_backward_visits")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._rule: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._n_backward_visits = 0

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """Tensor sharing this value but cut off the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    def __rmul__(self, other):
        return mul(_wrap(other, self), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self))

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Create a leaf tensor."""
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], op: str,
          rule: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents),
                 dtype=data.dtype)
    if out.requires_grad:
        out._parents = parents
        out._rule = rule
        out._op = op
    else:
        out._op = op
    return out


def _check_same_dtype(op: str, *ts: Tensor) -> None:
    dts = {t.dtype for t in ts}
    if len(dts) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(str(d) for d in dts)}; "
                         "operands must share one float dtype")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcastable(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# -- elementwise arithmetic ---------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("add", a, b)
    _broadcastable(a, b, "add")
    out = a.data + b.data
    return _make(out, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("sub", a, b)
    _broadcastable(a, b, "sub")
    out = a.data - b.data
    return _make(out, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("mul", a, b)
    _broadcastable(a, b, "mul")
    out = a.data * b.data
    return _make(out, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("div", a, b)
    _broadcastable(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b), "div",
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), numerically stable; gradient is the logistic sigmoid."""
    out = np.logaddexp(np.zeros((), dtype=a.dtype), a.data)
    return _make(out, (a,), "softplus",
                 lambda g: ((g * _sigmoid(a.data)).astype(a.dtype, copy=False),))


def normal_cdf(a: Tensor) -> Tensor:
    """Standard normal CDF; gradient is the normal pdf."""
    out = _ndtr(a.data).astype(a.dtype, copy=False)
    return _make(out, (a,), "normal_cdf",
                 lambda g: ((g * _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data))
                            .astype(a.dtype, copy=False),))


def floor(a: Tensor) -> Tensor:
    """Elementwise floor. Carries no gradient (detached from the tape)."""
    return Tensor(np.floor(a.data))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip by value; backward is identity inside [lo, hi] and zero outside."""
    if not lo <= hi:
        raise ValueError(f"clip: lo={lo} must not exceed hi={hi}")
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(out, (a,), "clip", lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data).astype(a.dtype, copy=False)
    return _make(out, (a,), "leaky_relu",
                 lambda g: (np.where(pos, g, np.asarray(slope, a.dtype) * g),))


# -- matrix / tensor ops ------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _make(out, (a, b), "matmul",
                 lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map y = x @ w.T + b with x (N, in) and w (out, in)."""
    _check_same_dtype("linear", x, w, *( (b,) if b is not None else () ))
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: x {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} must be ({w.shape[0]},)")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    if b is None:
        return _make(out, (x, w), "linear",
                     lambda g: (g @ w.data, g.T @ x.data))
    return _make(out, (x, w, b), "linear",
                 lambda g: (g @ w.data, g.T @ x.data, g.sum(axis=0)))


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride=1, padding=0) -> Tensor:
    """2-D convolution (NCHW x OIHW) via im2col + one matmul."""
    _check_same_dtype("conv2d", x, w, *( (b,) if b is not None else () ))
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input/kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {ci}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias {b.shape} must be ({o},)")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {(sh, sw)}")
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for padded input "
                         f"{h + 2 * ph}x{wd + 2 * pw}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols6 = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            cols6[:, :, ki, kj] = xp[:, :, ki:ki + sh * oh:sh, kj:kj + sw * ow:sw]
    cols = cols6.reshape(n, c * kh * kw, oh * ow)
    wmat = w.data.reshape(o, c * kh * kw)
    out = np.matmul(wmat, cols)                       # (n, o, oh*ow)
    if b is not None:
        out = out + b.data.reshape(1, o, 1)
    out = out.reshape(n, o, oh, ow)

    def rule(g: np.ndarray):
        gm = g.reshape(n, o, oh * ow)
        dw = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        dcols = np.matmul(wmat.T, gm).reshape(n, c, kh, kw, oh, ow)
        dxp = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                dxp[:, :, ki:ki + sh * oh:sh, kj:kj + sw * ow:sw] += dcols[:, :, ki, kj]
        dx = dxp[:, :, ph:ph + h, pw:pw + wd] if (ph or pw) else dxp
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, "conv2d", rule)


def nearest_upsample(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour spatial upsampling by an integer factor."""
    if x.data.ndim != 4:
        raise ShapeError(f"nearest_upsample: need NCHW input, got {x.shape}")
    f = int(factor)
    if f < 1:
        raise ValueError(f"nearest_upsample: factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    out = x.data.repeat(f, axis=2).repeat(f, axis=3)

    def rule(g: np.ndarray):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return _make(out, (x,), "nearest_upsample", rule)


def _pool_bounds(size: int, out: int) -> list[tuple[int, int]]:
    return [(int(np.floor(i * size / out)), int(np.ceil((i + 1) * size / out)))
            for i in range(out)]


def adaptive_avg_pool2d(x: Tensor, output_size: tuple[int, int]) -> Tensor:
    """Average pooling onto a fixed output grid, any input resolution."""
    if x.data.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool2d: need NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    oh, ow = _pair(output_size)
    if oh < 1 or ow < 1 or h < 1 or w < 1:
        raise ShapeError(f"adaptive_avg_pool2d: invalid sizes in={h}x{w} out={oh}x{ow}")
    hb = _pool_bounds(h, oh)
    wb = _pool_bounds(w, ow)
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    for i, (h0, h1) in enumerate(hb):
        for j, (w0, w1) in enumerate(wb):
            out[:, :, i, j] = x.data[:, :, h0:h1, w0:w1].mean(axis=(2, 3))

    def rule(g: np.ndarray):
        dx = np.zeros_like(x.data)
        for i, (h0, h1) in enumerate(hb):
            for j, (w0, w1) in enumerate(wb):
                area = (h1 - h0) * (w1 - w0)
                dx[:, :, h0:h1, w0:w1] += g[:, :, i:i + 1, j:j + 1] / area
        return (dx,)

    return _make(out, (x,), "adaptive_avg_pool2d", rule)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g: np.ndarray):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), "softmax", rule)


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: scales kept activations by 1/(1-p) at train time."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return _make(x.data.copy(), (x,), "dropout", lambda g: (g,))
    if rng is None:
        raise ValueError("dropout: train mode needs a random generator")
    keep = (rng.random(x.shape) >= p)
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    out = np.where(keep, x.data * scale, 0.0).astype(x.dtype, copy=False)
    return _make(out, (x,), "dropout",
                 lambda g: (np.where(keep, g * scale, 0.0).astype(x.dtype, copy=False),))


# -- reductions ---------------------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, x.shape).astype(x.dtype, copy=False),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), "sum", rule)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size if axis is None else x.data.shape[axis] if isinstance(axis, int) \
        else int(np.prod([x.data.shape[a] for a in axis]))

    def rule(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).astype(x.dtype, copy=False),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk / count, x.shape).astype(x.dtype, copy=False),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), "mean", rule)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Scalar mean squared error."""
    _check_same_dtype("mse", pred, target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes differ, {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = np.asarray((diff * diff).mean(), dtype=pred.dtype)
    n = pred.size

    def rule(g: np.ndarray):
        base = (2.0 / n) * diff * g
        return (base.astype(pred.dtype, copy=False),
                (-base).astype(pred.dtype, copy=False))

    return _make(out, (pred, target), "mse", rule)


# -- shape plumbing -----------------------------------------------------------

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (int/slice) indexing; backward scatters into a zero tensor."""
    out = x.data[idx]

    def rule(g: np.ndarray):
        dx = np.zeros_like(x.data)
        dx[idx] = g
        return (dx,)

    return _make(np.ascontiguousarray(out), (x,), "getitem", rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    _check_same_dtype("concat", *tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def rule(g: np.ndarray):
        sl = [slice(None)] * g.ndim
        grads = []
        for k in range(len(tensors)):
            sl[axis] = slice(int(offsets[k]), int(offsets[k + 1]))
            grads.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(grads)

    return _make(out, tuple(tensors), "concat", rule)


# -- custom gradients ---------------------------------------------------------

def register_custom_gradient(forward_fn: Callable, backward_fn: Callable,
                             name: str = "custom") -> Callable[..., Tensor]:
    """Build an op whose backward bypasses autodiff of its forward.

    ``forward_fn(*arrays, **kw) -> (out_array, ctx)`` computes the value;
    ``backward_fn(upstream, ctx) -> tuple_of_input_grads`` maps the upstream
    gradient plus saved context to one gradient (or None) per tensor input.
    """

    def op(*inputs: Tensor, **kwargs) -> Tensor:
        arrays = [t.data for t in inputs]
        out_data, ctx = forward_fn(*arrays, **kwargs)
        return _make(np.asarray(out_data), tuple(inputs), name,
                     lambda g: backward_fn(g, ctx))

    return op


_ste_round = None


def ste_round(x: Tensor) -> Tensor:
    """Hard round (half away from zero) with identity gradient."""
    global _ste_round
    if _ste_round is None:
        _ste_round = register_custom_gradient(
            lambda a: (round_half_away(a), None),
            lambda g, ctx: (g,),
            name="ste_round")
    return _ste_round(x)


def round_half_away(a: np.ndarray) -> np.ndarray:
    """Deterministic rounding, exact .5 ties go away from zero."""
    return np.sign(a) * np.floor(np.abs(a) + 0.5)


# -- backward engine ----------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(t) into every reachable requires_grad tensor."""
    if root.size != 1:
        raise GradientContractError(
            f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise GradientContractError("backward: root does not require grad")

    order = _topo_order(root)
    flowing: dict[int, np.ndarray] = {
        id(root): np.ones(root.shape, dtype=root.dtype)}

    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        node._n_backward_visits += 1
        node.grad = g if node.grad is None else node.grad + g
        if node._rule is None:
            continue
        in_grads = node._rule(g)
        if len(in_grads) != len(node._parents):
            raise GradientContractError(
                f"{node._op}: backward rule returned {len(in_grads)} gradients "
                f"for {len(node._parents)} inputs")
        for parent, ig in zip(node._parents, in_grads):
            if ig is None or not parent.requires_grad:
                continue
            ig = np.asarray(ig)
            if ig.shape != parent.shape:
                raise GradientContractError(
                    f"{node._op}: backward produced gradient of shape {ig.shape} "
                    f"for input of shape {parent.shape}")
            if id(parent) in flowing:
                flowing[id(parent)] = flowing[id(parent)] + ig
            else:
                flowing[id(parent)] = ig


# -- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter Adam moments plus shared hyperparameters."""
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
              state: AdamState) -> None:
    """One bias-corrected Adam update, in place on the parameter data."""
    if len(params) != len(grads):
        raise ValueError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for p, m in zip(params, state.m):
        if m.shape != p.shape:
            raise ValueError(f"adam_step: moment shape {m.shape} != param {p.shape}")
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam_step: non-finite gradient for parameter {i}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))
        p.data -= update.astype(p.dtype, copy=False)


class Adam:
    """Convenience wrapper driving `adam_step` from accumulated .grad fields."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        adam_step(self.params, grads, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
