"""Minimal dense neural-network kernel with reverse-mode autodiff.

Tensors wrap numpy arrays; every differentiable operation records the inputs
it needs on a per-evaluation tape (the output tensor holds its parents and a
backward closure), and ``Tensor.backward`` replays that tape in reverse
topological order. Training runs in 32-bit floats; gradient verification runs
the same code in 64-bit through the ``grad_check`` harness.

The operation set is exactly what a grouped-convolution spatial encoder with
batch normalization, ELU activations, an LSTM stack, and a sigmoid head
needs; there is no broadcasting zoo, no GPU, and no higher-order derivatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

BCE_EPS = 1e-7
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Tensor:
    """A dense array with an optional gradient and a backward tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def __add__(self, other) -> "Tensor":
        return add(self, _ensure_tensor(other, self.dtype))

    def __mul__(self, other) -> "Tensor":
        return mul(self, _ensure_tensor(other, self.dtype))

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this tensor into every reachable parent."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("implicit backward needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            gout = grads.pop(id(node), None)
            if gout is None:
                continue
            if node.requires_grad and not node._parents:
                node.grad = gout if node.grad is None else node.grad + gout
            if node._backward_fn is None:
                continue
            for parent, pgrad in zip(node._parents, node._backward_fn(gout)):
                if pgrad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pgrad if key not in grads else grads[key] + pgrad


def _ensure_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape the operand had before broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(gout):
        return _unbroadcast(gout, a.data.shape), _unbroadcast(gout, b.data.shape)

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(gout):
        return (
            _unbroadcast(gout * b.data, a.data.shape),
            _unbroadcast(gout * a.data, b.data.shape),
        )

    return _make(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shapes {a.data.shape} and {b.data.shape} do not chain")
    data = a.data @ b.data

    def backward(gout):
        return gout @ b.data.T, a.data.T @ gout

    return _make(data, (a, b), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def backward(gout):
        return (gout.reshape(x.data.shape),)

    return _make(data, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(gout):
        return tuple(np.split(gout, offsets, axis=axis))

    return _make(data, tuple(tensors), backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """A contiguous slice of ``length`` entries along one axis."""
    if not (0 <= start and start + length <= x.data.shape[axis]):
        raise ValueError(
            f"slice [{start}:{start + length}] is outside axis {axis}"
            f" of shape {x.data.shape}"
        )
    key = [slice(None)] * x.data.ndim
    key[axis] = slice(start, start + length)
    key = tuple(key)
    data = x.data[key].copy()

    def backward(gout):
        gx = np.zeros_like(x.data)
        gx[key] = gout
        return (gx,)

    return _make(data, (x,), backward)


def tensor_sum(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(gout):
        return (np.broadcast_to(gout, x.data.shape).astype(x.data.dtype),)

    return _make(data, (x,), backward)


def elu(x: Tensor) -> Tensor:
    """x for x > 0, e^x - 1 otherwise (unit ELU scale)."""
    positive = x.data > 0
    clipped = np.minimum(x.data, 0.0)
    data = np.where(positive, x.data, np.expm1(clipped))

    def backward(gout):
        return (gout * np.where(positive, 1.0, np.exp(clipped)).astype(x.data.dtype),)

    return _make(data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-x.data))

    def backward(gout):
        return (gout * data * (1.0 - data),)

    return _make(data, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)

    def backward(gout):
        return (gout * (1.0 - data * data),)

    return _make(data, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` for a batch of row vectors."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def bce_loss(predictions: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Binary cross entropy over probabilities, clamped to [eps, 1-eps]."""
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    y = np.asarray(labels, dtype=predictions.data.dtype)
    if y.shape != predictions.data.shape:
        raise ValueError(f"labels shape {y.shape} does not match {predictions.data.shape}")
    p = np.clip(predictions.data, BCE_EPS, 1.0 - BCE_EPS)
    per_sample = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    scale = 1.0 / predictions.data.size if reduction == "mean" else 1.0
    data = np.asarray(per_sample.sum() * scale, dtype=predictions.data.dtype)
    inside = (predictions.data >= BCE_EPS) & (predictions.data <= 1.0 - BCE_EPS)

    def backward(gout):
        dp = (-(y / p) + (1.0 - y) / (1.0 - p)) * scale
        return (gout * np.where(inside, dp, 0.0).astype(predictions.data.dtype),)

    return _make(data, (predictions,), backward)


def _normalize_padding(padding) -> tuple[tuple[int, int], tuple[int, int]]:
    """Accept (pad_h, pad_w) or ((top, bottom), (left, right))."""
    try:
        ph, pw = padding
    except (TypeError, ValueError) as exc:
        raise ValueError(f"padding must be a pair, got {padding!r}") from exc
    if np.isscalar(ph):
        ph = (int(ph), int(ph))
    else:
        ph = (int(ph[0]), int(ph[1]))
    if np.isscalar(pw):
        pw = (int(pw), int(pw))
    else:
        pw = (int(pw[0]), int(pw[1]))
    if min(ph + pw) < 0:
        raise ValueError(f"padding must be non-negative, got {padding!r}")
    return ph, pw


@dataclass(frozen=True)
class ConvSpec:
    """Validated configuration of one grouped 2-D convolution."""

    kernel_h: int
    kernel_w: int
    out_channels: int
    groups: int = 1
    stride: int = 1
    padding: tuple = ((0, 0), (0, 0))
    with_bias: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "padding", _normalize_padding(self.padding))
        if min(self.kernel_h, self.kernel_w) < 1:
            raise ValueError(f"kernel must be positive, got {self.kernel_h}x{self.kernel_w}")
        if self.stride < 1:
            raise ValueError(f"stride must be at least 1, got {self.stride}")
        if self.groups < 1 or self.out_channels % self.groups:
            raise ValueError(
                f"out_channels {self.out_channels} not divisible by groups {self.groups}"
            )

    def check_in_channels(self, in_channels: int) -> None:
        if in_channels % self.groups:
            raise ValueError(
                f"in_channels {in_channels} not divisible by groups {self.groups}"
            )

    def out_size(self, height: int, width: int) -> tuple[int, int]:
        (pt, pb), (pl, pr) = self.padding
        h = (height + pt + pb - self.kernel_h) // self.stride + 1
        w = (width + pl + pr - self.kernel_w) // self.stride + 1
        if h < 1 or w < 1:
            raise ValueError(
                f"kernel {self.kernel_h}x{self.kernel_w} does not fit"
                f" a padded {height}x{width} input"
            )
        return h, w


def conv2d_grouped(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding=((0, 0), (0, 0)),
    groups: int = 1,
) -> Tensor:
    """Grouped 2-D cross-correlation over [N, C, H, W] with per-side padding.

    The weight is [out_channels, in_channels // groups, kh, kw]; accumulation
    runs in fixed (channel, kernel row, kernel column) order so results are
    reproducible bit for bit.
    """
    if x.data.ndim != 4:
        raise ValueError(f"input must be [N, C, H, W], got shape {x.data.shape}")
    if weight.data.ndim != 4:
        raise ValueError(f"weight must be 4-D, got shape {weight.data.shape}")
    n, c_in, height, width = x.data.shape
    c_out, c_in_group, kh, kw = weight.data.shape
    spec = ConvSpec(
        kernel_h=kh,
        kernel_w=kw,
        out_channels=c_out,
        groups=groups,
        stride=stride,
        padding=padding,
        with_bias=bias is not None,
    )
    spec.check_in_channels(c_in)
    if c_in_group != c_in // groups:
        raise ValueError(
            f"weight expects {c_in_group} channels per group,"
            f" input provides {c_in // groups}"
        )
    if bias is not None and bias.data.shape != (c_out,):
        raise ValueError(f"bias must have shape ({c_out},), got {bias.data.shape}")
    h_out, w_out = spec.out_size(height, width)
    (pt, pb), (pl, pr) = spec.padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cog = c_out // groups
    out = np.zeros((n, c_out, h_out, w_out), dtype=x.data.dtype)
    if bias is not None:
        out += bias.data[None, :, None, None]
    for g in range(groups):
        xg = xp[:, g * c_in_group : (g + 1) * c_in_group]
        wg = weight.data[g * cog : (g + 1) * cog]
        og = out[:, g * cog : (g + 1) * cog]
        for c in range(c_in_group):
            for i in range(kh):
                for j in range(kw):
                    patch = xg[
                        :, c, i : i + stride * h_out : stride, j : j + stride * w_out : stride
                    ]
                    og += patch[:, None] * wg[None, :, c, i, j, None, None]

    def backward(gout):
        gx_padded = np.zeros_like(xp)
        gweight = np.zeros_like(weight.data)
        for g in range(groups):
            xg = xp[:, g * c_in_group : (g + 1) * c_in_group]
            wg = weight.data[g * cog : (g + 1) * cog]
            gg = gout[:, g * cog : (g + 1) * cog]
            gxg = gx_padded[:, g * c_in_group : (g + 1) * c_in_group]
            for c in range(c_in_group):
                for i in range(kh):
                    for j in range(kw):
                        patch = xg[
                            :,
                            c,
                            i : i + stride * h_out : stride,
                            j : j + stride * w_out : stride,
                        ]
                        gweight[g * cog : (g + 1) * cog, c, i, j] = (
                            gg * patch[:, None]
                        ).sum(axis=(0, 2, 3))
                        gxg[
                            :,
                            c,
                            i : i + stride * h_out : stride,
                            j : j + stride * w_out : stride,
                        ] += (gg * wg[None, :, c, i, j, None, None]).sum(axis=1)
        gx = gx_padded[:, :, pt : pt + height, pl : pl + width]
        gbias = None if bias is None else gout.sum(axis=(0, 2, 3))
        return gx, gweight, gbias

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel batch normalization over [N, C, H, W].

    Training mode normalizes with the biased batch statistics and folds them
    into the running arrays in place; eval mode normalizes with the running
    statistics and touches nothing.
    """
    if x.data.ndim != 4:
        raise ValueError(f"input must be [N, C, H, W], got shape {x.data.shape}")
    channels = x.data.shape[1]
    if gamma.data.shape != (channels,) or beta.data.shape != (channels,):
        raise ValueError(f"scale/shift must have shape ({channels},)")
    axes = (0, 2, 3)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean[:] = (1.0 - momentum) * running_mean + momentum * mean
        running_var[:] = (1.0 - momentum) * running_var + momentum * var
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * x_hat + beta.data[None, :, None, None]
    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

    def backward(gout):
        ggamma = (gout * x_hat).sum(axis=axes)
        gbeta = gout.sum(axis=axes)
        gxhat = gout * gamma.data[None, :, None, None]
        if training:
            gx = (
                inv_std[None, :, None, None]
                / m
                * (
                    m * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - x_hat * (gxhat * x_hat).sum(axis=axes, keepdims=True)
                )
            )
        else:
            gx = gxhat * inv_std[None, :, None, None]
        return gx.astype(x.data.dtype), ggamma, gbeta

    return _make(out.astype(x.data.dtype), (x, gamma, beta), backward)


@dataclass
class LstmParams:
    """Gate parameters of one LSTM layer: input, hidden, and bias per gate."""

    w_xf: Tensor
    w_xi: Tensor
    w_xc: Tensor
    w_xo: Tensor
    w_hf: Tensor
    w_hi: Tensor
    w_hc: Tensor
    w_ho: Tensor
    b_f: Tensor
    b_i: Tensor
    b_c: Tensor
    b_o: Tensor

    def __post_init__(self) -> None:
        d, h = self.w_xf.data.shape
        for name in ("w_xf", "w_xi", "w_xc", "w_xo"):
            if getattr(self, name).data.shape != (d, h):
                raise ValueError(f"{name} must have shape ({d}, {h})")
        for name in ("w_hf", "w_hi", "w_hc", "w_ho"):
            if getattr(self, name).data.shape != (h, h):
                raise ValueError(f"{name} must have shape ({h}, {h})")
        for name in ("b_f", "b_i", "b_c", "b_o"):
            if getattr(self, name).data.shape != (1, h):
                raise ValueError(f"{name} must have shape (1, {h})")

    @property
    def input_size(self) -> int:
        return self.w_xf.data.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.w_xf.data.shape[1]

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: np.random.Generator, dtype=np.float32):
        """Uniform +-1/sqrt(h) initialization for every gate parameter."""
        bound = 1.0 / math.sqrt(hidden_size)

        def draw(shape):
            return Tensor(
                rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True
            )

        d, h = input_size, hidden_size
        return cls(
            w_xf=draw((d, h)),
            w_xi=draw((d, h)),
            w_xc=draw((d, h)),
            w_xo=draw((d, h)),
            w_hf=draw((h, h)),
            w_hi=draw((h, h)),
            w_hc=draw((h, h)),
            w_ho=draw((h, h)),
            b_f=draw((1, h)),
            b_i=draw((1, h)),
            b_c=draw((1, h)),
            b_o=draw((1, h)),
        )

    def parameters(self) -> list[Tensor]:
        return [getattr(self, f.name) for f in self.__dataclass_fields__.values()]


def lstm_cell(
    x_t: Tensor, h_prev: Tensor, c_prev: Tensor, params: LstmParams
) -> tuple[Tensor, Tensor]:
    """One LSTM step: gates from input and previous hidden, new cell and hidden.

    Forget, input, and output gates are sigmoids of affine maps; the candidate
    memory is a tanh; the new cell is forget * old + input * candidate and the
    new hidden is output * tanh(cell).
    """
    n, d = x_t.data.shape
    h = params.hidden_size
    if d != params.input_size:
        raise ValueError(f"input width {d} does not match parameters ({params.input_size})")
    if h_prev.data.shape != (n, h) or c_prev.data.shape != (n, h):
        raise ValueError(
            f"state shapes {h_prev.data.shape}/{c_prev.data.shape} must be ({n}, {h})"
        )
    forget = sigmoid(add(add(matmul(x_t, params.w_xf), matmul(h_prev, params.w_hf)), params.b_f))
    gate_in = sigmoid(add(add(matmul(x_t, params.w_xi), matmul(h_prev, params.w_hi)), params.b_i))
    candidate = tanh(add(add(matmul(x_t, params.w_xc), matmul(h_prev, params.w_hc)), params.b_c))
    gate_out = sigmoid(add(add(matmul(x_t, params.w_xo), matmul(h_prev, params.w_ho)), params.b_o))
    c_t = add(mul(forget, c_prev), mul(gate_in, candidate))
    h_t = mul(gate_out, tanh(c_t))
    return h_t, c_t


class GroupedConv2d:
    """A grouped convolution layer owning its weight and optional bias."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: tuple[int, int],
        groups: int = 1,
        stride: int = 1,
        padding=(0, 0),
        bias: bool = True,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        spec = ConvSpec(
            kernel_h=kernel[0],
            kernel_w=kernel[1],
            out_channels=out_channels,
            groups=groups,
            stride=stride,
            padding=padding,
            with_bias=bias,
        )
        spec.check_in_channels(in_channels)
        self.spec = spec
        self.in_channels = in_channels
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = (in_channels // groups) * kernel[0] * kernel[1]
        bound = math.sqrt(6.0 / fan_in)
        self.weight = Tensor(
            rng.uniform(
                -bound, bound, size=(out_channels, in_channels // groups, kernel[0], kernel[1])
            ).astype(dtype),
            requires_grad=True,
        )
        if bias:
            b_bound = 1.0 / math.sqrt(fan_in)
            self.bias = Tensor(
                rng.uniform(-b_bound, b_bound, size=out_channels).astype(dtype),
                requires_grad=True,
            )
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d_grouped(
            x,
            self.weight,
            self.bias,
            stride=self.spec.stride,
            padding=self.spec.padding,
            groups=self.spec.groups,
        )

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]


class BatchNorm2d:
    """Per-channel batch normalization with learnable scale and shift."""

    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM, dtype=np.float32):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training,
            eps=self.eps,
            momentum=self.momentum,
        )

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]


class Linear:
    """A dense affine layer with Kaiming-uniform weights."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        bias: bool = True,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = math.sqrt(6.0 / in_features)
        self.weight = Tensor(
            rng.uniform(-bound, bound, size=(in_features, out_features)).astype(dtype),
            requires_grad=True,
        )
        if bias:
            b_bound = 1.0 / math.sqrt(in_features)
            self.bias = Tensor(
                rng.uniform(-b_bound, b_bound, size=(1, out_features)).astype(dtype),
                requires_grad=True,
            )
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]


class LstmLayer:
    """An LSTM over [batch, time, features] with zero initial states."""

    def __init__(
        self,
        input_size: int,
        hidden_size: int,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = LstmParams.init(input_size, hidden_size, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 3:
            raise ValueError(f"input must be [batch, time, features], got {x.data.shape}")
        batch, steps, _ = x.data.shape
        h = self.params.hidden_size
        h_t = Tensor(np.zeros((batch, h), dtype=x.data.dtype))
        c_t = Tensor(np.zeros((batch, h), dtype=x.data.dtype))
        outputs = []
        for t in range(steps):
            x_t = reshape(narrow(x, 1, t, 1), (batch, x.data.shape[2]))
            h_t, c_t = lstm_cell(x_t, h_t, c_t, self.params)
            outputs.append(reshape(h_t, (batch, 1, h)))
        return concat(outputs, axis=1)

    def parameters(self) -> list[Tensor]:
        return self.params.parameters()


def adam_step(
    value: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """One bias-corrected Adam update, applied to ``value`` in place."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    value -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over a fixed parameter list, with per-parameter moment state."""

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-4,
        beta1: float = ADAM_BETA1,
        beta2: float = ADAM_BETA2,
        eps: float = ADAM_EPS,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.moments = [
            (np.zeros_like(p.data, dtype=np.float64), np.zeros_like(p.data, dtype=np.float64))
            for p in self.params
        ]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        for p, (m, v) in zip(self.params, self.moments):
            if p.grad is None:
                continue
            value = p.data.astype(np.float64)
            adam_step(
                value,
                p.grad.astype(np.float64),
                m,
                v,
                self.step_count,
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
            )
            p.data = value.astype(p.data.dtype)


class PlateauScheduler:
    """Halve the learning rate after `patience` epochs without improvement.

    An epoch improves when its metric drops at least ``min_delta`` below the
    best seen so far. The learning rate never goes below ``floor``.
    """

    def __init__(
        self,
        optimizer: Adam,
        factor: float = 0.5,
        patience: int = 5,
        min_delta: float = 1e-4,
        floor: float = 1e-6,
    ):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.floor = floor
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, metric: float) -> float:
        if metric <= self.best - self.min_delta:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.optimizer.lr = max(self.optimizer.lr * self.factor, self.floor)
                self.bad_epochs = 0
        return self.optimizer.lr


@dataclass
class GradCheckReport:
    """Worst relative disagreement between analytic and numeric gradients."""

    cases: int
    checks: int
    max_rel_error: float
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(
    fn: Callable[..., Tensor],
    sampler: Callable[[np.random.Generator], tuple[Tensor, ...]],
    tolerance: float = 1e-5,
    cases: int = 20,
    step: float = 1e-6,
    max_elements: int = 200,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of a scalar function against central differences.

    ``sampler`` draws fresh 64-bit inputs per case; ``fn`` maps them to a
    scalar tensor. Every element of every differentiable input (or a random
    subset above ``max_elements``) is perturbed by ``step`` both ways. The
    relative error divisor is max(1, |analytic|, |numeric|), so tiny gradients
    are compared absolutely.
    """
    rng = np.random.default_rng(seed)
    failures: list[str] = []
    worst = 0.0
    checks = 0
    for case in range(cases):
        inputs = sampler(rng)
        out = fn(*inputs)
        if out.data.size != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        for t in inputs:
            t.grad = None
        out.backward()
        for j, t in enumerate(inputs):
            if not t.requires_grad:
                continue
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            size = t.data.size
            if size <= max_elements:
                indices = range(size)
            else:
                indices = rng.choice(size, size=max_elements, replace=False)
            for idx in indices:
                original = t.data.flat[idx]
                t.data.flat[idx] = original + step
                f_plus = float(fn(*inputs).data)
                t.data.flat[idx] = original - step
                f_minus = float(fn(*inputs).data)
                t.data.flat[idx] = original
                numeric = (f_plus - f_minus) / (2.0 * step)
                a = float(analytic.flat[idx])
                error = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, error)
                checks += 1
                if error > tolerance:
                    failures.append(
                        f"case {case} input {j} element {int(idx)}:"
                        f" analytic {a:.6e} vs numeric {numeric:.6e}"
                    )
    return GradCheckReport(cases=cases, checks=checks, max_rel_error=worst, failures=failures)
