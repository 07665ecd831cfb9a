"""Layers with analytic forward/backward passes.

Activations are channel-last: a batch has shape ``(B, L_1, ..., L_N, C)`` and a
flattened batch ``(B, F)``. Shapes passed to ``output_shape`` exclude the batch
axis. Every layer is float64 throughout.

Layers that reduce over the batch (only :class:`BatchNorm`) accept a ``comm``
object so that data-parallel workers can share statistics. ``comm`` must
provide ``allreduce(arrays, weighted=False)`` and a ``weight`` attribute (the
worker's fraction of the global batch); ``None`` means the whole batch is
local.
"""

from __future__ import annotations

import itertools
import math
from typing import ClassVar

import numpy as np

from ..errors import ShapeError


def _as_tuple(value, n, name):
    if isinstance(value, (int, np.integer)):
        return (int(value),) * n
    value = tuple(int(v) for v in value)
    if len(value) != n:
        raise ValueError(f"{name} must have {n} entries, got {len(value)}")
    return value


def _window_slices(offset, stride, out_extents, first_axis):
    """Index selecting, per output position, the input element at ``offset``."""
    idx = [slice(None)] * first_axis
    for o, s, n in zip(offset, stride, out_extents):
        idx.append(slice(o, o + s * (n - 1) + 1, s))
    return tuple(idx)


def window_mean(x, kernel, stride, first_axis):
    """Mean over sliding windows along ``len(kernel)`` axes starting at ``first_axis``.

    Computed as ``x0 + sum(x - x0) / size`` with ``x0`` the window's first
    element, accumulating over kernel offsets in lexicographic order, so a
    constant window returns its value exactly. Because the arithmetic per
    output element does not depend on leading axes, pooling a batch and
    downsampling each sample separately give bitwise-identical results.
    """
    extents = x.shape[first_axis:first_axis + len(kernel)]
    out = tuple((n - k) // s + 1 for n, k, s in zip(extents, kernel, stride))
    offsets = itertools.product(*(range(k) for k in kernel))
    first = np.asarray(x[_window_slices(next(offsets), stride, out, first_axis)], dtype=np.float64)
    acc = np.zeros(first.shape)
    for offset in offsets:
        acc += x[_window_slices(offset, stride, out, first_axis)] - first
    return first + acc / float(math.prod(kernel))


class Layer:
    kind: ClassVar[str] = ""
    kind_id: ClassVar[int] = 0
    has_params: ClassVar[bool] = False

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def output_shape(self, in_shape: tuple) -> tuple:
        raise NotImplementedError

    def param_shapes(self) -> dict[str, tuple]:
        return {}

    def init_params(self, rng: np.random.Generator) -> None:
        pass

    def hyperparams(self) -> dict:
        return {}

    def forward(self, x, train, comm=None):
        raise NotImplementedError

    def backward(self, dy, cache, comm=None):
        raise NotImplementedError

    def flops(self, in_shape) -> int:
        """Approximate multiply-adds per sample of one forward pass."""
        return 0

    def same_spec(self, other) -> bool:
        return type(self) is type(other) and self.hyperparams() == other.hyperparams()

    def __repr__(self):
        hp = ", ".join(f"{k}={v}" for k, v in self.hyperparams().items())
        return f"{type(self).__name__}({hp})"


class ConvND(Layer):
    """N-dimensional cross-correlation; weight shape ``(K_1..K_N, C_in, C_out)``."""

    kind = "conv"
    kind_id = 1
    has_params = True

    def __init__(self, kernel, in_channels, out_channels, stride=1, padding=0, bias=True):
        super().__init__()
        kernel = (int(kernel),) if isinstance(kernel, (int, np.integer)) else tuple(int(k) for k in kernel)
        n = len(kernel)
        if n not in (1, 2, 3):
            raise ValueError(f"convolution dimensionality must be 1, 2 or 3, got {n}")
        self.kernel = kernel
        self.stride = _as_tuple(stride, n, "stride")
        self.padding = _as_tuple(padding, n, "padding")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError("kernel and stride must be >= 1 and padding >= 0")
        if in_channels < 1 or out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.bias = bool(bias)

    @property
    def ndim(self):
        return len(self.kernel)

    def hyperparams(self):
        return {
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "bias": self.bias,
        }

    def output_shape(self, in_shape):
        if len(in_shape) != self.ndim + 1:
            raise ShapeError(f"conv{self.ndim}d expects {self.ndim} spatial axes + channels, got shape {in_shape}")
        if in_shape[-1] != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} input channels, got {in_shape[-1]}")
        out = []
        for d, (n, k, s, p) in enumerate(zip(in_shape[:-1], self.kernel, self.stride, self.padding)):
            o = (n + 2 * p - k) // s + 1 if n + 2 * p >= k else 0
            if o < 1:
                raise ShapeError(f"conv output extent underflows on spatial axis {d} (input {n}, kernel {k})")
            out.append(o)
        return tuple(out) + (self.out_channels,)

    def param_shapes(self):
        shapes = {"weight": self.kernel + (self.in_channels, self.out_channels)}
        if self.bias:
            shapes["bias"] = (self.out_channels,)
        return shapes

    def init_params(self, rng):
        bound = math.sqrt(1.0 / (self.in_channels * math.prod(self.kernel)))
        for name, shape in self.param_shapes().items():
            self.params[name] = rng.uniform(-bound, bound, size=shape)

    def flops(self, in_shape):
        out = self.output_shape(in_shape)
        return math.prod(out[:-1]) * math.prod(self.kernel) * self.in_channels * self.out_channels

    def _pad(self, x):
        if not any(self.padding):
            return x
        width = [(0, 0)] + [(p, p) for p in self.padding] + [(0, 0)]
        return np.pad(x, width)

    def forward(self, x, train, comm=None):
        xp = self._pad(x)
        out_sp = self.output_shape(x.shape[1:])[:-1]
        batch = x.shape[0]
        w = self.params["weight"]
        y = np.zeros((batch * math.prod(out_sp), self.out_channels))
        for offset in itertools.product(*(range(k) for k in self.kernel)):
            cols = xp[_window_slices(offset, self.stride, out_sp, 1)]
            y += np.ascontiguousarray(cols).reshape(-1, self.in_channels) @ w[offset]
        if self.bias:
            y += self.params["bias"]
        return y.reshape((batch,) + out_sp + (self.out_channels,)), (xp, x.shape, out_sp)

    def backward(self, dy, cache, comm=None):
        xp, in_shape, out_sp = cache
        w = self.params["weight"]
        dy2 = dy.reshape(-1, self.out_channels)
        dxp = np.zeros_like(xp)
        dw = np.empty_like(w)
        for offset in itertools.product(*(range(k) for k in self.kernel)):
            sl = _window_slices(offset, self.stride, out_sp, 1)
            cols = np.ascontiguousarray(xp[sl]).reshape(-1, self.in_channels)
            dw[offset] = cols.T @ dy2
            dxp[sl] += (dy2 @ w[offset].T).reshape(dxp[sl].shape)
        grads = {"weight": dw}
        if self.bias:
            grads["bias"] = dy2.sum(axis=0)
        if any(self.padding):
            inner = (slice(None),) + tuple(slice(p, p + n) for p, n in zip(self.padding, in_shape[1:-1])) + (slice(None),)
            dxp = dxp[inner]
        return dxp, grads


class AvgPoolND(Layer):
    kind = "avgpool"
    kind_id = 2

    def __init__(self, kernel, stride=None):
        super().__init__()
        kernel = (int(kernel),) if isinstance(kernel, (int, np.integer)) else tuple(int(k) for k in kernel)
        if len(kernel) not in (1, 2, 3):
            raise ValueError("pooling dimensionality must be 1, 2 or 3")
        self.kernel = kernel
        self.stride = kernel if stride is None else _as_tuple(stride, len(kernel), "stride")
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError("kernel and stride must be >= 1")

    def hyperparams(self):
        return {"kernel": self.kernel, "stride": self.stride}

    def output_shape(self, in_shape):
        n = len(self.kernel)
        if len(in_shape) != n + 1:
            raise ShapeError(f"avgpool{n}d expects {n} spatial axes + channels, got shape {in_shape}")
        out = []
        for d, (L, k, s) in enumerate(zip(in_shape[:-1], self.kernel, self.stride)):
            if L < k:
                raise ShapeError(f"avgpool output extent underflows on spatial axis {d} (input {L}, kernel {k})")
            out.append((L - k) // s + 1)
        return tuple(out) + (in_shape[-1],)

    def flops(self, in_shape):
        return math.prod(self.output_shape(in_shape)) * math.prod(self.kernel)

    def forward(self, x, train, comm=None):
        self.output_shape(x.shape[1:])
        return window_mean(x, self.kernel, self.stride, 1), x.shape

    def backward(self, dy, cache, comm=None):
        in_shape = cache
        out_sp = dy.shape[1:-1]
        dx = np.zeros(in_shape)
        scaled = dy / float(math.prod(self.kernel))
        for offset in itertools.product(*(range(k) for k in self.kernel)):
            dx[_window_slices(offset, self.stride, out_sp, 1)] += scaled
        return dx, {}


class BatchNorm(Layer):
    """Per-channel normalisation over the batch and all spatial axes.

    Running variance is updated with the unbiased batch variance; the forward
    normalisation uses the biased one.
    """

    kind = "batchnorm"
    kind_id = 3
    has_params = True

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        if channels < 1:
            raise ValueError("channels must be >= 1")
        if not 0.0 <= momentum <= 1.0 or eps < 0:
            raise ValueError("momentum must lie in [0, 1] and eps must be >= 0")
        self.channels = int(channels)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.buffers = {"running_mean": np.zeros(self.channels), "running_var": np.ones(self.channels)}

    def hyperparams(self):
        return {"channels": self.channels, "momentum": self.momentum, "eps": self.eps}

    def output_shape(self, in_shape):
        if in_shape[-1] != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels, got {in_shape[-1]}")
        return tuple(in_shape)

    def param_shapes(self):
        return {"gamma": (self.channels,), "beta": (self.channels,)}

    def init_params(self, rng):
        self.params["gamma"] = np.ones(self.channels)
        self.params["beta"] = np.zeros(self.channels)
        self.buffers = {"running_mean": np.zeros(self.channels), "running_var": np.ones(self.channels)}

    def flops(self, in_shape):
        return 2 * math.prod(in_shape)

    def forward(self, x, train, comm=None):
        axes = tuple(range(x.ndim - 1))
        gamma, beta = self.params["gamma"], self.params["beta"]
        if not train:
            inv_std = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
            return (x - self.buffers["running_mean"]) * inv_std * gamma + beta, None
        count = float(x.size // self.channels)
        total = x.sum(axis=axes)
        if comm is not None:
            total, count = comm.allreduce([total, np.array(count)])
            count = float(count)
        mean = total / count
        centered = x - mean
        sq = (centered * centered).sum(axis=axes)
        if comm is not None:
            (sq,) = comm.allreduce([sq])
        var = sq / count
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = centered * inv_std
        m = self.momentum
        unbiased = var * (count / (count - 1.0)) if count > 1 else var
        self.buffers["running_mean"] = (1.0 - m) * self.buffers["running_mean"] + m * mean
        self.buffers["running_var"] = (1.0 - m) * self.buffers["running_var"] + m * unbiased
        return xhat * gamma + beta, (xhat, inv_std, count)

    def backward(self, dy, cache, comm=None):
        xhat, inv_std, count = cache
        axes = tuple(range(dy.ndim - 1))
        grads = {"gamma": (dy * xhat).sum(axis=axes), "beta": dy.sum(axis=axes)}
        g = dy * self.params["gamma"]
        s1 = g.sum(axis=axes)
        s2 = (g * xhat).sum(axis=axes)
        if comm is None:
            dx = (inv_std / count) * (count * g - s1 - xhat * s2)
        else:
            # local dy is the gradient of this worker's own mean loss; the
            # shared sums are rescaled to the global loss and back.
            s1, s2 = comm.allreduce([s1, s2], weighted=True)
            dx = (inv_std / count) * (count * g - (s1 + xhat * s2) / comm.weight)
        return dx, grads


class ReLU(Layer):
    kind = "relu"
    kind_id = 4

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, train, comm=None):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, dy, cache, comm=None):
        return np.where(cache, dy, 0.0), {}


class Tanh(Layer):
    kind = "tanh"
    kind_id = 5

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, train, comm=None):
        y = np.tanh(x)
        return y, y

    def backward(self, dy, cache, comm=None):
        return dy * (1.0 - cache * cache), {}


class Flatten(Layer):
    kind = "flatten"
    kind_id = 6

    def output_shape(self, in_shape):
        return (math.prod(in_shape),)

    def forward(self, x, train, comm=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, comm=None):
        return dy.reshape(cache), {}


class FullyConnected(Layer):
    """``y = x @ W + b`` with ``W`` of shape ``(in_features, out_features)``."""

    kind = "fc"
    kind_id = 7
    has_params = True

    def __init__(self, in_features, out_features, bias=True):
        super().__init__()
        if in_features < 1 or out_features < 1:
            raise ValueError("feature counts must be >= 1")
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.bias = bool(bias)

    def hyperparams(self):
        return {"in_features": self.in_features, "out_features": self.out_features, "bias": self.bias}

    def output_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.in_features:
            raise ShapeError(f"fully connected layer expects ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)

    def param_shapes(self):
        shapes = {"weight": (self.in_features, self.out_features)}
        if self.bias:
            shapes["bias"] = (self.out_features,)
        return shapes

    def init_params(self, rng):
        bound = math.sqrt(1.0 / self.in_features)
        for name, shape in self.param_shapes().items():
            self.params[name] = rng.uniform(-bound, bound, size=shape)

    def flops(self, in_shape):
        return self.in_features * self.out_features

    def forward(self, x, train, comm=None):
        y = x @ self.params["weight"]
        if self.bias:
            y = y + self.params["bias"]
        return y, x

    def backward(self, dy, cache, comm=None):
        x = cache
        grads = {"weight": x.T @ dy}
        if self.bias:
            grads["bias"] = dy.sum(axis=0)
        return dy @ self.params["weight"].T, grads


LAYER_TYPES: dict[str, type[Layer]] = {
    cls.kind: cls for cls in (ConvND, AvgPoolND, BatchNorm, ReLU, Tanh, Flatten, FullyConnected)
}
LAYER_BY_ID: dict[int, type[Layer]] = {cls.kind_id: cls for cls in LAYER_TYPES.values()}


def make_layer(kind: str, **hyperparams) -> Layer:
    try:
        cls = LAYER_TYPES[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}; expected one of {sorted(LAYER_TYPES)}") from None
    return cls(**hyperparams)
