"""A small reverse-mode autodiff engine over numpy arrays.

Only the operators the res15 network and the metric-learning losses need are
provided. There is no general broadcasting: binary ops take equal shapes, and
scalar parameters enter through ``scale_shift``. Tensors keep whatever float
dtype they were created with; training runs in float32, gradient checks in
float64.
"""

import logging
import os
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from kws.errors import DecodeError, NonFinite, ShapeMismatch, ZeroVector
from utils.binary import (
    read_array,
    read_header,
    read_string,
    read_u32,
    write_array,
    write_header,
    write_string,
    write_u32,
)

logger = logging.getLogger(__name__)

DEBUG = os.getenv("KWS_DEBUG", "false").lower() == "true"
NORM_FLOOR = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_grad_enabled = True


@contextmanager
def no_grad():
    """Forward passes inside this block record no graph."""
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    def __init__(self, values, requires_grad: bool = False, dtype=None):
        self.values = np.asarray(values, dtype=dtype)
        if self.values.dtype.kind != "f":
            self.values = self.values.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate gradients into every tensor reachable from this one."""
        if grad is None:
            if self.values.size != 1:
                raise ShapeMismatch("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.values)

        order: List[Tensor] = []
        seen = set()

        def visit(t: Tensor):
            # iterative DFS; res15 graphs are deep enough to hit the recursion limit
            stack = [(t, False)]
            while stack:
                node, done = stack.pop()
                if done:
                    order.append(node)
                    continue
                if id(node) in seen:
                    continue
                seen.add(id(node))
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in seen:
                        stack.append((p, False))

        visit(self)
        grads: Dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    def __repr__(self):
        return f"<Tensor(shape={self.shape}, dtype={self.dtype})>"


class Parameter(Tensor):
    def __init__(self, values, dtype=None):
        super().__init__(values, requires_grad=True, dtype=dtype)


def _make(values: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if DEBUG and not np.all(np.isfinite(values)):
        raise NonFinite(f"non-finite output from {backward.__qualname__.split('.')[0]}")
    out = Tensor(values)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _expect(cond: bool, message: str) -> None:
    if not cond:
        raise ShapeMismatch(message)


# --- network ops -----------------------------------------------------------


def conv2d(x: Tensor, k: Tensor, dilation: Tuple[int, int] = (1, 1)) -> Tensor:
    """3x3 cross-correlation with zero padding equal to the dilation.

    Args:
        x (Tensor): (N, C, H, W)
        k (Tensor): (F, C, 3, 3)
        dilation (Tuple[int, int]): tap spacing along H and along W

    Returns:
        Tensor: (N, F, H, W)
    """
    _expect(x.values.ndim == 4 and k.values.ndim == 4, "conv2d expects 4-d input and kernel")
    n, c, h, w = x.shape
    f, kc, kh, kw = k.shape
    _expect(kc == c and kh == 3 and kw == 3, f"kernel {k.shape} does not fit input {x.shape}")
    dh, dw = dilation
    _expect(dh >= 1 and dw >= 1, "dilation must be >= 1")

    xp = np.pad(x.values, ((0, 0), (0, 0), (dh, dh), (dw, dw)))
    kv = k.values
    taps = [(i, j) for i in range(3) for j in range(3)]

    def window(arr, i, j):
        return arr[:, :, i * dh : i * dh + h, j * dw : j * dw + w]

    out = np.zeros((n, h, w, f), dtype=np.result_type(x.values, kv))
    for i, j in taps:
        out += np.tensordot(window(xp, i, j), kv[:, :, i, j], axes=([1], [1]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        gt = g.transpose(0, 2, 3, 1)
        dk = np.zeros_like(kv)
        dxp = np.zeros_like(xp)
        for i, j in taps:
            dk[:, :, i, j] = np.tensordot(gt, window(xp, i, j), axes=([0, 1, 2], [0, 2, 3]))
            window(dxp, i, j)[...] += np.tensordot(gt, kv[:, :, i, j], axes=([3], [0])).transpose(0, 3, 1, 2)
        return dxp[:, :, dh : dh + h, dw : dw + w], dk

    return _make(out, (x, k), backward)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch statistics normalise the input and the running
    statistics (updated in place, unbiased variance) follow them with the
    given momentum. In eval mode the running statistics are used.
    """
    _expect(x.values.ndim == 4, "batchnorm2d expects (N, C, H, W)")
    c = x.shape[1]
    _expect(gamma.shape == (c,) and beta.shape == (c,), f"gamma/beta do not match {c} channels")
    shape = (1, c, 1, 1)
    gv, bv = gamma.values.reshape(shape), beta.values.reshape(shape)

    if training:
        count = x.values.size // c
        mean = x.values.mean(axis=(0, 2, 3), keepdims=True)
        var = x.values.var(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.values - mean) * inv_std
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.reshape(c)
        unbiased = var.reshape(c) * count / max(count - 1, 1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def backward(g):
            dxhat = g * gv
            dx = inv_std / count * (
                count * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
            return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    else:
        inv_std = 1.0 / np.sqrt(running_var.reshape(shape) + eps)
        xhat = (x.values - running_mean.reshape(shape)) * inv_std

        def backward(g):
            return g * gv * inv_std, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _make((gv * xhat + bv).astype(x.dtype, copy=False), (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0

    def backward(g):
        return (g * mask,)

    return _make(x.values * mask, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _expect(a.shape == b.shape, f"add: {a.shape} vs {b.shape}")

    def backward(g):
        return g, g

    return _make(a.values + b.values, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _expect(a.shape == b.shape, f"sub: {a.shape} vs {b.shape}")

    def backward(g):
        return g, -g

    return _make(a.values - b.values, (a, b), backward)


def add_constant(x: Tensor, c: float) -> Tensor:
    def backward(g):
        return (g,)

    return _make(x.values + c, (x,), backward)


def global_avg_pool2d(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    _expect(x.values.ndim == 4, "global_avg_pool2d expects (N, C, H, W)")
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _make(x.values.mean(axis=(2, 3)), (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight.T + bias with weight shaped (out, in)."""
    _expect(x.values.ndim == 2 and weight.values.ndim == 2, "linear expects 2-d input and weight")
    _expect(x.shape[1] == weight.shape[1], f"linear: input {x.shape} vs weight {weight.shape}")
    out = x.values @ weight.values.T
    parents = (x, weight)
    if bias is not None:
        _expect(bias.shape == (weight.shape[0],), "linear: bias size")
        out = out + bias.values
        parents = (x, weight, bias)

    def backward(g):
        grads = (g @ weight.values, g.T @ x.values)
        return grads + ((g.sum(axis=0),) if bias is not None else ())

    return _make(out, parents, backward)


def _unit_rows(a: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    norm = np.sqrt((a * a).sum(axis=1, keepdims=True))
    floored = norm < NORM_FLOOR
    if DEBUG and floored.any():
        raise ZeroVector("cosine similarity of a zero vector")
    safe = np.where(floored, NORM_FLOOR, norm)
    return a / safe, safe, floored


def _unit_rows_backward(d_unit, unit, safe, floored):
    radial = unit * (d_unit * unit).sum(axis=1, keepdims=True)
    return np.where(floored, d_unit, d_unit - radial) / safe


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine matrix: (n, D) x (m, D) -> (n, m). Norms floored at 1e-12."""
    _expect(a.values.ndim == 2 and b.values.ndim == 2, "cosine_similarity expects 2-d inputs")
    _expect(a.shape[1] == b.shape[1], f"cosine_similarity: {a.shape} vs {b.shape}")
    ua, sa, fa = _unit_rows(a.values)
    ub, sb, fb = _unit_rows(b.values)

    def backward(g):
        return (
            _unit_rows_backward(g @ ub, ua, sa, fa),
            _unit_rows_backward(g.T @ ua, ub, sb, fb),
        )

    return _make(ua @ ub.T, (a, b), backward)


def pairwise_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance matrix (n, m). Zero distances pass no gradient."""
    _expect(a.values.ndim == 2 and b.values.ndim == 2, "pairwise_distance expects 2-d inputs")
    _expect(a.shape[1] == b.shape[1], f"pairwise_distance: {a.shape} vs {b.shape}")
    diff = a.values[:, None, :] - b.values[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))

    def backward(g):
        coef = np.where(dist > NORM_FLOOR, g / np.maximum(dist, NORM_FLOOR), 0.0)
        weighted = coef[:, :, None] * diff
        return weighted.sum(axis=1), -weighted.sum(axis=0)

    return _make(dist, (a, b), backward)


def scale_shift(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """w * x + b for scalar tensors w and b."""
    _expect(w.values.size == 1 and b.values.size == 1, "scale_shift takes scalar w and b")
    wv, bv = w.values.reshape(()), b.values.reshape(())

    def backward(g):
        return g * wv, np.asarray((g * x.values).sum()).reshape(w.shape), np.asarray(g.sum()).reshape(b.shape)

    return _make(wv * x.values + bv, (x, w, b), backward)


def take_rows(x: Tensor, index: Sequence[int]) -> Tensor:
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        dx = np.zeros_like(x.values)
        np.add.at(dx, index, g)
        return (dx,)

    return _make(x.values[index], (x,), backward)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    _expect(a.values.ndim == 2 and a.shape[1:] == b.shape[1:], "concat_rows: column mismatch")
    n = a.shape[0]

    def backward(g):
        return g[:n], g[n:]

    return _make(np.concatenate([a.values, b.values], axis=0), (a, b), backward)


def group_mean(x: Tensor, groups: Sequence[Sequence[int]]) -> Tensor:
    """Row g of the output is the mean of the rows of ``x`` listed in groups[g]."""
    avg = np.zeros((len(groups), x.shape[0]), dtype=x.dtype)
    for gi, rows in enumerate(groups):
        _expect(len(rows) > 0, "group_mean: empty group")
        avg[gi, list(rows)] = 1.0 / len(rows)

    def backward(g):
        return (avg.T @ g,)

    return _make(avg @ x.values, (x,), backward)


def transpose(x: Tensor) -> Tensor:
    _expect(x.values.ndim == 2, "transpose expects a matrix")

    def backward(g):
        return (g.T,)

    return _make(np.ascontiguousarray(x.values.T), (x,), backward)


def gather(x: Tensor, rows: Sequence[int], cols: Sequence[int]) -> Tensor:
    """Vector of x[rows[i], cols[i]]."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def backward(g):
        dx = np.zeros_like(x.values)
        np.add.at(dx, (rows, cols), g)
        return (dx,)

    return _make(x.values[rows, cols], (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        return (np.full_like(x.values, g),)

    return _make(np.asarray(x.values.sum()), (x,), backward)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(
    logits: Tensor,
    targets: Sequence[int],
    mask: Optional[Sequence[bool]] = None,
    normalizer: Optional[float] = None,
) -> Tensor:
    """Sum over selected rows of -log softmax(logits)[row, target] / normalizer.

    Args:
        logits (Tensor): (n, k)
        targets (Sequence[int]): true class per row
        mask (Optional[Sequence[bool]]): rows that contribute (all by default)
        normalizer (Optional[float]): divisor (number of selected rows by default)
    """
    _expect(logits.values.ndim == 2, "softmax_cross_entropy expects (n, k) logits")
    n, k = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    _expect(targets.shape == (n,), "one target per row")
    weights = np.ones(n) if mask is None else np.asarray(mask, dtype=np.float64)
    if normalizer is None:
        normalizer = max(weights.sum(), 1.0)
    weights = (weights / normalizer).astype(logits.dtype)

    logp = log_softmax(logits.values)
    loss = -(weights * logp[np.arange(n), targets]).sum()

    def backward(g):
        d = np.exp(logp)
        d[np.arange(n), targets] -= 1.0
        return (g * weights[:, None] * d,)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# --- modules ---------------------------------------------------------------


class Module:
    """Container with named parameters, buffers and a train/eval flag."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if name in getattr(self, "buffer_names", ()):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def parameter_count(self) -> int:
        return sum(p.values.size for p in self.parameters())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((n, p.values.copy()) for n, p in self.named_parameters())
        state.update((n, b.copy()) for n, b in self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(own) | set(buffers)) - set(state)
        if missing:
            raise ShapeMismatch(f"state is missing {sorted(missing)}")
        for name, p in own.items():
            _expect(state[name].shape == p.shape, f"{name}: {state[name].shape} vs {p.shape}")
            p.values = state[name].astype(p.dtype, copy=True)
        for name, b in buffers.items():
            _expect(state[name].shape == b.shape, f"{name}: {state[name].shape} vs {b.shape}")
            b[...] = state[name]


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    """Bias-free 3x3 convolution (batch norm supplies the affine term)."""

    def __init__(self, in_channels: int, out_channels: int, dilation: int, rng, dtype=np.float32):
        self.dilation = (dilation, dilation)
        self.weight = Parameter(
            uniform_init(rng, (out_channels, in_channels, 3, 3), in_channels * 9, dtype)
        )

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.dilation)


class BatchNorm2d(Module):
    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training
        )


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng, bias: bool = True, dtype=np.float32):
        self.weight = Parameter(uniform_init(rng, (out_features, in_features), in_features, dtype))
        self.bias = (
            Parameter(uniform_init(rng, (out_features,), in_features, dtype)) if bias else None
        )

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


# --- optimiser -------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)


def adam_step(params: List[np.ndarray], grads: List[Optional[np.ndarray]], state: AdamState) -> None:
    """One Adam update in place. Weight decay is added to the gradient (L2 style)."""
    _expect(len(params) == len(grads), "one gradient per parameter")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    _expect(len(state.first_moment) == len(params), "optimizer state does not match parameters")

    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        _expect(m.shape == p.shape, f"moment shape {m.shape} vs parameter {p.shape}")
        g = np.zeros_like(p) if g is None else g
        _expect(g.shape == p.shape, f"gradient shape {g.shape} vs parameter {p.shape}")
        g = g + state.weight_decay * p
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype, copy=False)


class Adam:
    def __init__(self, params: List[Parameter], lr: float = 1e-3, weight_decay: float = 0.0,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self) -> None:
        adam_step([p.values for p in self.params], [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# --- checkpoints -----------------------------------------------------------
#
# header (magic "KWSM", version 1, record count, 0), then per record:
#   uint16 name length, UTF-8 name, uint32 ndim, ndim x uint32 dims,
#   float32 little-endian payload in row-major order

CHECKPOINT_MAGIC = b"KWSM"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: Path, state: Dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        write_header(fh, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(state), 0)
        for name, values in state.items():
            write_string(fh, name)
            write_u32(fh, values.ndim, *values.shape)
            write_array(fh, values, "<f4")


def load_checkpoint(path: Path) -> "OrderedDict[str, np.ndarray]":
    state: "OrderedDict[str, np.ndarray]" = OrderedDict()
    with open(path, "rb") as fh:
        count, _ = read_header(fh, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
        for _ in range(count):
            name = read_string(fh)
            (ndim,) = read_u32(fh)
            shape = read_u32(fh, ndim) if ndim else ()
            size = int(np.prod(shape)) if shape else 1
            state[name] = read_array(fh, size, "<f4").reshape(shape)
        if fh.read(1):
            raise DecodeError(f"{path}: trailing bytes after {count} records")
    return state
