"""Forward kernels with their reverse-mode rules.

Every public function takes and returns :class:`~hcgnet.tensor.Tensor` objects
and registers a backward closure on the active tape (if any input is tracked).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .tensor import Tensor, record

AXES = {"batch": 0, "channel": 1, "height": 2, "width": 3}


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    bias: bool = False

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "stride", "dilation", "groups"):
            if getattr(self, name) < 1:
                raise ShapeError(f"ConvSpec.{name} must be positive, got {getattr(self, name)}")
        if self.padding < 0 or min(self.kernel) < 1:
            raise ShapeError(f"invalid kernel/padding in {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"channels ({self.in_channels} -> {self.out_channels}) not divisible by "
                f"groups={self.groups}"
            )

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        ho = (h + 2 * self.padding - self.dilation * (kh - 1) - 1) // self.stride + 1
        wo = (w + 2 * self.padding - self.dilation * (kw - 1) - 1) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {h}x{w} too small for {self}: output {ho}x{wo}")
        return ho, wo

    def macs(self, h: int, w: int) -> int:
        ho, wo = self.output_hw(h, w)
        kh, kw = self.kernel
        return ho * wo * self.out_channels * (self.in_channels // self.groups) * kh * kw

    @property
    def num_params(self) -> int:
        n = int(np.prod(self.weight_shape))
        return n + (self.out_channels if self.bias else 0)


def _window(xp: np.ndarray, i: int, j: int, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    d, s = spec.dilation, spec.stride
    return xp[:, :, i * d : i * d + s * (ho - 1) + 1 : s, j * d : j * d + s * (wo - 1) + 1 : s]


def _pad(x: np.ndarray, p: int, value: float = 0.0) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _unpad(x: np.ndarray, p: int) -> np.ndarray:
    return x if p == 0 else x[:, :, p:-p, p:-p]


def _conv_im2col(x, w, spec, ho, wo):
    n = x.shape[0]
    g = spec.groups
    kh, kw = spec.kernel
    xp = _pad(x, spec.padding)
    cols = np.stack(
        [_window(xp, i, j, spec, ho, wo) for i in range(kh) for j in range(kw)], axis=2
    )  # (N, Cin, K, Ho, Wo)
    cols = cols.reshape(n, g, (spec.in_channels // g) * kh * kw, ho * wo)
    wg = w.reshape(g, spec.out_channels // g, -1)
    out = np.matmul(wg[None], cols).reshape(n, spec.out_channels, ho, wo)

    def grads(dout):
        dout_g = dout.reshape(n, g, spec.out_channels // g, ho * wo)
        dw = np.einsum("ngop,ngkp->gok", dout_g, cols).reshape(w.shape)
        dcols = np.matmul(wg.transpose(0, 2, 1)[None], dout_g)
        dcols = dcols.reshape(n, spec.in_channels, kh * kw, ho, wo)
        dxp = np.zeros(xp.shape, dtype=dout.dtype)
        for k in range(kh * kw):
            _window(dxp, k // kw, k % kw, spec, ho, wo)[...] += dcols[:, :, k]
        return _unpad(dxp, spec.padding), dw

    return out, grads


def _conv_direct(x, w, spec, ho, wo):
    n = x.shape[0]
    g = spec.groups
    ci, co = spec.in_channels // g, spec.out_channels // g
    kh, kw = spec.kernel
    xp = _pad(x, spec.padding)
    out = np.zeros((n, spec.out_channels, ho, wo), dtype=np.result_type(x, w))
    if spec.depthwise:
        for i in range(kh):
            for j in range(kw):
                out += _window(xp, i, j, spec, ho, wo) * w[None, :, 0, i, j, None, None]
    else:
        og = out.reshape(n, g, co, ho, wo)
        for i in range(kh):
            for j in range(kw):
                xs = _window(xp, i, j, spec, ho, wo).reshape(n, g, ci, ho, wo)
                og += np.einsum("ngchw,goc->ngohw", xs, w[:, :, i, j].reshape(g, co, ci))

    def grads(dout):
        dxp = np.zeros(xp.shape, dtype=dout.dtype)
        dw = np.zeros(w.shape, dtype=dout.dtype)
        if spec.depthwise:
            for i in range(kh):
                for j in range(kw):
                    win = _window(xp, i, j, spec, ho, wo)
                    dw[:, 0, i, j] = np.einsum("nchw,nchw->c", dout, win)
                    _window(dxp, i, j, spec, ho, wo)[...] += dout * w[None, :, 0, i, j, None, None]
        else:
            dg = dout.reshape(n, g, co, ho, wo)
            for i in range(kh):
                for j in range(kw):
                    xs = _window(xp, i, j, spec, ho, wo).reshape(n, g, ci, ho, wo)
                    dw[:, :, i, j] = np.einsum("ngohw,ngchw->goc", dg, xs).reshape(
                        spec.out_channels, ci
                    )
                    wk = w[:, :, i, j].reshape(g, co, ci)
                    _window(dxp, i, j, spec, ho, wo)[...] += np.einsum(
                        "ngohw,goc->ngchw", dg, wk
                    ).reshape(n, spec.in_channels, ho, wo)
        return _unpad(dxp, spec.padding), dw

    return out, grads


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    spec: Optional[ConvSpec] = None,
    method: str = "auto",
) -> Tensor:
    """2-D cross-correlation with stride, zero padding, dilation and groups.

    ``method`` selects the kernel: ``"direct"`` accumulates one shifted window
    per kernel tap, ``"im2col"`` lowers to a batched matrix product.  ``"auto"``
    picks direct for depthwise layers and im2col otherwise.
    """
    if spec is None:
        o, i, kh, kw = weight.shape
        spec = ConvSpec(x.channels, o, (kh, kw), bias=bias is not None)
    if x.channels != spec.in_channels:
        raise ShapeError(f"conv2d: input has {x.channels} channels, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"conv2d: weight shape {weight.shape} != {spec.weight_shape}")
    if bias is not None and bias.shape != (1, spec.out_channels, 1, 1):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != (1, {spec.out_channels}, 1, 1)")
    ho, wo = spec.output_hw(x.shape[2], x.shape[3])
    if method == "auto":
        method = "direct" if spec.depthwise else "im2col"
    if method == "direct":
        out, grads = _conv_direct(x.data, weight.data, spec, ho, wo)
    elif method == "im2col":
        out, grads = _conv_im2col(x.data, weight.data, spec, ho, wo)
    else:
        raise ValueError(f"unknown conv method {method!r}")
    if bias is not None:
        out = out + bias.data

    def bw(dout):
        dx, dw = grads(dout)
        if bias is None:
            return dx, dw
        return dx, dw, dout.sum(axis=(0, 2, 3), keepdims=True)

    inputs = [x, weight] if bias is None else [x, weight, bias]
    return record("conv2d", Tensor(out), inputs, bw)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BNState:
    """Per-channel affine parameters plus running statistics.

    ``gamma``/``beta`` are learnable ``(1, C, 1, 1)`` tensors; the running
    statistics are plain arrays and are only touched by train-mode calls.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, dtype=np.float32, **kw) -> "BNState":
        return cls(
            gamma=Tensor(np.ones((1, channels, 1, 1), dtype=dtype)),
            beta=Tensor(np.zeros((1, channels, 1, 1), dtype=dtype)),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            **kw,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[1]


def batch_norm(x: Tensor, state: BNState, train: Optional[bool] = None) -> Tensor:
    """Per-channel normalization over (N, H, W) followed by ``gamma * x + beta``.

    Train mode normalizes with biased batch statistics and folds the batch mean
    and unbiased variance into the running estimates; inference mode uses the
    running estimates and leaves the state untouched.
    """
    c = x.channels
    if state.channels != c or state.beta.shape[1] != c or state.running_mean.shape != (c,):
        raise ShapeError(f"batch_norm: input has {c} channels, state has {state.channels}")
    if train is None:
        train = state.mode == "train"
    xd = x.data
    gamma, beta = state.gamma.data, state.beta.data
    if train:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mean = xd.mean(axis=(0, 2, 3), keepdims=True)
        var = xd.var(axis=(0, 2, 3), keepdims=True)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        mom = state.momentum
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mean.reshape(c)
        state.running_var[...] = (1 - mom) * state.running_var + mom * unbiased.reshape(c)
    else:
        mean = state.running_mean.reshape(1, c, 1, 1).astype(xd.dtype)
        var = state.running_var.reshape(1, c, 1, 1).astype(xd.dtype)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mean) * inv_std
    out = gamma * xhat + beta

    def bw(dy):
        dgamma = (dy * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dbeta = dy.sum(axis=(0, 2, 3), keepdims=True)
        dxhat = dy * gamma
        if train:
            dx = inv_std * (
                dxhat
                - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            )
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return record("batch_norm", Tensor(out.astype(xd.dtype, copy=False)), [x, state.gamma, state.beta], bw)


# ---------------------------------------------------------------------------
# elementwise


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def pointwise(x: Tensor, kind: str) -> Tensor:
    xd = x.data
    if kind == "relu":
        y = np.maximum(xd, 0)
        bw = lambda dy: (dy * (xd > 0),)
    elif kind == "tanh":
        y = np.tanh(xd)
        bw = lambda dy: (dy * (1 - y * y),)
    elif kind == "sigmoid":
        y = _sigmoid(xd)
        bw = lambda dy: (dy * y * (1 - y),)
    else:
        raise ValueError(f"unknown pointwise kind {kind!r}")
    return record(kind, Tensor(y), [x], bw)


def relu(x: Tensor) -> Tensor:
    return pointwise(x, "relu")


def tanh(x: Tensor) -> Tensor:
    return pointwise(x, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    return pointwise(x, "sigmoid")


def softmax_over(
    x: Union[Tensor, Sequence[Tensor]], axes: Iterable[str]
) -> Union[Tensor, list[Tensor]]:
    """Softmax normalized jointly over the named axes.

    Axis names are ``channel``, ``height``, ``width`` and ``branch``.  The
    ``branch`` axis indexes a sequence of equally shaped tensors; when it is
    requested, ``x`` must be that sequence and a list is returned.
    """
    axes = set(axes)
    if not axes:
        raise ValueError("softmax_over needs at least one axis")
    unknown = axes - {"channel", "height", "width", "branch"}
    if unknown:
        raise ValueError(f"unknown softmax axes {sorted(unknown)}")
    if isinstance(x, Tensor):
        if "branch" in axes:
            raise ValueError("branch softmax needs a sequence of tensors")
        branches = [x]
    else:
        branches = list(x)
        if not branches or any(b.shape != branches[0].shape for b in branches):
            raise ShapeError("softmax_over: branches must share one shape")
    stacked = np.stack([b.data for b in branches])  # (B, N, C, H, W)
    ax = tuple(sorted((0 if a == "branch" else AXES[a] + 1) for a in axes))
    e = np.exp(stacked - stacked.max(axis=ax, keepdims=True))
    p = e / e.sum(axis=ax, keepdims=True)

    def bw(dy_stacked):
        s = (dy_stacked * p).sum(axis=ax, keepdims=True)
        return p * (dy_stacked - s)

    if isinstance(x, Tensor):
        return record("softmax", Tensor(p[0]), [x], lambda dy: (bw(dy[None])[0],))

    # one tape node per output branch; each routes its gradient to all inputs
    outs = []
    for b in range(len(branches)):
        def bw_b(dy, b=b):
            d = np.zeros_like(p)
            d[b] = dy
            return tuple(bw(d))
        outs.append(record("softmax", Tensor(p[b]), branches, bw_b))
    return outs


# ---------------------------------------------------------------------------
# structural


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise ShapeError("concat of nothing")
    n, _, h, w = inputs[0].shape
    for t in inputs:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat: shape {t.shape} incompatible with (N={n}, H={h}, W={w})")
    sizes = [t.channels for t in inputs]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in inputs], axis=1)

    def bw(dy):
        return tuple(dy[:, bounds[i] : bounds[i + 1]] for i in range(len(inputs)))

    return record("concat", Tensor(out), inputs, bw)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.channels:
        raise ShapeError(f"slice [{start}, {stop}) outside {x.channels} channels")

    def bw(dy):
        dx = np.zeros(x.shape, dtype=dy.dtype)
        dx[:, start:stop] = dy
        return (dx,)

    return record("slice", Tensor(x.data[:, start:stop]), [x], bw)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    # channels must agree; batch and spatial dims may broadcast from 1 on one side
    if a.shape == b.shape:
        return a.shape
    for big, small in ((a, b), (b, a)):
        if small.shape[1] == big.shape[1] and all(
            s == g or s == 1 for s, g in zip(small.shape, big.shape)
        ):
            return big.shape
    raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    out = a.data + b.data
    return record("add", Tensor(out), [a, b], lambda dy: (_reduce_to(dy, a.shape), _reduce_to(dy, b.shape)))


def broadcast_mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "broadcast_mul")
    ad, bd = a.data, b.data
    return record(
        "mul",
        Tensor(ad * bd),
        [a, b],
        lambda dy: (_reduce_to(dy * bd, a.shape), _reduce_to(dy * ad, b.shape)),
    )


def spatial_weighted_sum(x: Tensor, weights: Tensor) -> Tensor:
    """``z[n, c] = sum_{h, w} x[n, c, h, w] * weights[n, 0, h, w]``.

    The single-channel weight map is shared by every channel of ``x``.
    """
    n, c, h, w = x.shape
    if weights.shape != (n, 1, h, w):
        raise ShapeError(f"weights {weights.shape} must be {(n, 1, h, w)}")
    xd, sd = x.data, weights.data
    z = np.einsum("nchw,nhw->nc", xd, sd[:, 0]).reshape(n, c, 1, 1)

    def bw(dz):
        dx = dz * sd
        ds = np.einsum("nc,nchw->nhw", dz[:, :, 0, 0], xd)[:, None]
        return dx, ds

    return record("spatial_weighted_sum", Tensor(z), [x, weights], bw)


# ---------------------------------------------------------------------------
# pooling / affine / reductions


def max_pool(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    n, c, h, w = x.shape
    if h + 2 * padding < kernel or w + 2 * padding < kernel:
        raise ShapeError(f"max_pool: spatial dims {h}x{w} smaller than kernel {kernel}")
    spec = ConvSpec(c, c, (kernel, kernel), stride, padding, groups=c)
    ho, wo = spec.output_hw(h, w)
    xp = _pad(x.data, padding, -np.inf)
    wins = np.stack([_window(xp, i, j, spec, ho, wo) for i in range(kernel) for j in range(kernel)])
    arg = wins.argmax(axis=0)
    out = np.take_along_axis(wins, arg[None], axis=0)[0]

    def bw(dy):
        dxp = np.zeros(xp.shape, dtype=dy.dtype)
        for k in range(kernel * kernel):
            _window(dxp, k // kernel, k % kernel, spec, ho, wo)[...] += dy * (arg == k)
        return (_unpad(dxp, padding),)

    return record("max_pool", Tensor(out), [x], bw)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return record(
        "global_avg_pool",
        Tensor(out),
        [x],
        lambda dy: (np.broadcast_to(dy / (h * w), x.shape).astype(dy.dtype),),
    )


def pooling(x: Tensor, kind: str) -> Tensor:
    if kind == "max3x3_s2":
        return max_pool(x, 3, 2, 1)
    if kind == "global_avg":
        return global_avg_pool(x)
    raise ValueError(f"unknown pooling kind {kind!r}")


def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map on ``(N, C_in, 1, 1)`` descriptors; weight is ``(C_out, C_in, 1, 1)``."""
    if not x.is_descriptor():
        raise ShapeError(f"fully_connected expects a descriptor, got {x.shape}")
    c_out, c_in = weight.shape[:2]
    if weight.shape[2:] != (1, 1) or c_in != x.channels:
        raise ShapeError(f"fully_connected: weight {weight.shape} vs input {x.shape}")
    if bias is not None and bias.shape != (1, c_out, 1, 1):
        raise ShapeError(f"fully_connected: bias {bias.shape} != (1, {c_out}, 1, 1)")
    n = x.shape[0]
    x2, w2 = x.data[:, :, 0, 0], weight.data[:, :, 0, 0]
    y = x2 @ w2.T
    if bias is not None:
        y = y + bias.data[0, :, 0, 0]

    def bw(dy):
        d2 = dy[:, :, 0, 0]
        dx = (d2 @ w2).reshape(x.shape)
        dw = (d2.T @ x2).reshape(weight.shape)
        if bias is None:
            return dx, dw
        return dx, dw, d2.sum(axis=0).reshape(bias.shape)

    inputs = [x, weight] if bias is None else [x, weight, bias]
    return record("fully_connected", Tensor(y.reshape(n, c_out, 1, 1)), inputs, bw)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate == 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1 - rate)
    return record("dropout", Tensor(x.data * keep), [x], lambda dy: (dy * keep,))


def sum_all(x: Tensor, weights: Optional[np.ndarray] = None) -> Tensor:
    """Scalar ``sum(x)`` or ``sum(weights * x)`` as a (1, 1, 1, 1) tensor."""
    if weights is None:
        s = x.data.sum()
        bw = lambda dy: (np.broadcast_to(dy.reshape(()), x.shape).astype(dy.dtype),)
    else:
        weights = np.broadcast_to(np.asarray(weights, dtype=x.dtype), x.shape)
        s = (x.data * weights).sum()
        bw = lambda dy: (dy.reshape(()) * weights,)
    return record("sum", Tensor(np.reshape(s, (1, 1, 1, 1)).astype(x.dtype)), [x], bw)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``(N, K, 1, 1)`` logits against int labels."""
    n, k = logits.shape[:2]
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    z = logits.data[:, :, 0, 0]
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def bw(dy):
        g = np.exp(logp)
        g[np.arange(n), labels] -= 1
        return ((dy.reshape(()) / n) * g).reshape(logits.shape),

    return record(
        "cross_entropy", Tensor(np.reshape(loss, (1, 1, 1, 1)).astype(logits.dtype)), [logits], bw
    )
