"""Layer primitives with exact backward passes.

Every layer caches what it needs during a training-mode ``forward`` and
consumes that cache in ``backward``. Tensors are float64 arrays laid out as
``(batch, channels, *spatial)``.
"""
import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import DegenerateInputError, StateError


def _tuple(v, n):
    if isinstance(v, (tuple, list)):
        if len(v) != n:
            raise ValueError(f"expected {n} values, got {v}")
        return tuple(int(i) for i in v)
    return (int(v),) * n


def he_uniform(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Base class. Subclasses fill ``params`` / ``grads`` and list decayed names in ``decay``."""

    decay = ()

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self._cache = None

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def output_shape(self, shape):
        """Shape of the output for an input of ``shape`` (batch axis included)."""
        return shape

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a training-mode forward")
        cache, self._cache = self._cache, None
        return cache

    def children(self):
        return []

    def __repr__(self):
        return f"{type(self).__name__}()"


class Conv(Layer):
    """N-d cross-correlation (no kernel flip) with stride and zero padding.

    Weights have shape ``(out_channels, in_channels, *kernel)``.
    """

    decay = ("W",)

    def __init__(self, in_channels, out_channels, kernel, rank=1, stride=1, padding=0, rng=None, bias=True):
        super().__init__()
        self.rank = int(rank)
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = _tuple(kernel, self.rank)
        self.stride = _tuple(stride, self.rank)
        self.padding = _tuple(padding, self.rank)
        rng = np.random.default_rng(0) if rng is None else rng
        fan_in = self.in_channels * int(np.prod(self.kernel))
        self.params["W"] = he_uniform(rng, (self.out_channels, self.in_channels) + self.kernel, fan_in)
        if bias:
            self.params["b"] = np.zeros(self.out_channels)

    def output_shape(self, shape):
        if len(shape) != self.rank + 2:
            raise ValueError(f"conv{self.rank}d expects {self.rank + 2}-d input, got shape {shape}")
        if shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {shape[1]}")
        out = []
        for n, k, s, p in zip(shape[2:], self.kernel, self.stride, self.padding):
            if n + 2 * p < k:
                raise ValueError(f"kernel {k} larger than padded input {n + 2 * p}")
            out.append((n + 2 * p - k) // s + 1)
        return (shape[0], self.out_channels) + tuple(out)

    def _pad(self, x):
        if not any(self.padding):
            return x
        pads = [(0, 0), (0, 0)] + [(p, p) for p in self.padding]
        return np.pad(x, pads)

    def _columns(self, xp, out_spatial):
        r = self.rank
        win = sliding_window_view(xp, self.kernel, axis=tuple(range(2, 2 + r)))
        win = win[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in self.stride)]
        win = win[(slice(None), slice(None)) + tuple(slice(0, o) for o in out_spatial)]
        # (B, C, *O, *K) -> (B, *O, C, *K)
        order = (0,) + tuple(range(2, 2 + r)) + (1,) + tuple(range(2 + r, 2 + 2 * r))
        B = xp.shape[0]
        return win.transpose(order).reshape(B * int(np.prod(out_spatial)), -1)

    def forward(self, x, train=False, rng=None):
        out_shape = self.output_shape(x.shape)
        xp = self._pad(x)
        cols = self._columns(xp, out_shape[2:])
        Wm = self.params["W"].reshape(self.out_channels, -1)
        out = cols @ Wm.T
        if "b" in self.params:
            out += self.params["b"]
        B = x.shape[0]
        out = out.reshape((B,) + out_shape[2:] + (self.out_channels,))
        out = np.moveaxis(out, -1, 1)
        if train:
            self._cache = (x.shape, xp.shape, cols, out_shape)
        return np.ascontiguousarray(out)

    def backward(self, grad):
        x_shape, xp_shape, cols, out_shape = self._take_cache()
        g = np.moveaxis(grad, 1, -1).reshape(-1, self.out_channels)
        self.grads["W"] = (g.T @ cols).reshape(self.params["W"].shape)
        if "b" in self.params:
            self.grads["b"] = g.sum(axis=0)
        O = out_shape[2:]
        if all(st == 1 for st in self.stride):
            gxp = self._input_grad_unit_stride(grad)
        else:
            gxp = self._input_grad_scatter(g, xp_shape, O)
        if any(self.padding):
            crop = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(self.padding, x_shape[2:]))
            gxp = gxp[crop]
        return gxp

    def _input_grad_unit_stride(self, grad):
        # full correlation of the zero-padded output gradient with the flipped kernel
        r = self.rank
        pads = [(0, 0), (0, 0)] + [(k - 1, k - 1) for k in self.kernel]
        gp = np.pad(grad, pads)
        spatial = tuple(n - k + 1 for n, k in zip(gp.shape[2:], self.kernel))
        win = sliding_window_view(gp, self.kernel, axis=tuple(range(2, 2 + r)))
        order = (0,) + tuple(range(2, 2 + r)) + (1,) + tuple(range(2 + r, 2 + 2 * r))
        B = grad.shape[0]
        cols = win.transpose(order).reshape(B * int(np.prod(spatial)), -1)
        flip = (slice(None), slice(None)) + (slice(None, None, -1),) * r
        Wf = self.params["W"][flip]
        # (out, in, *K) -> (out, *K, in)
        Wm = np.moveaxis(Wf, 1, -1).reshape(-1, self.in_channels)
        gx = (cols @ Wm).reshape((B,) + spatial + (self.in_channels,))
        return np.ascontiguousarray(np.moveaxis(gx, -1, 1))

    def _input_grad_scatter(self, g, xp_shape, O):
        r = self.rank
        B = xp_shape[0]
        gcols = g @ self.params["W"].reshape(self.out_channels, -1)
        gcols = gcols.reshape((B,) + O + (self.in_channels,) + self.kernel)
        # -> (B, C, *K, *O) so each kernel offset is a contiguous (B, C, *O) block
        order = (0, 1 + r) + tuple(range(2 + r, 2 + 2 * r)) + tuple(range(1, 1 + r))
        gcols = gcols.transpose(order)
        gxp = np.zeros(xp_shape)
        for offset in itertools.product(*(range(k) for k in self.kernel)):
            idx = (slice(None), slice(None)) + tuple(
                slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, self.stride, O)
            )
            gxp[idx] += gcols[(slice(None), slice(None)) + offset]
        return gxp

    def __repr__(self):
        return (
            f"Conv{self.rank}d({self.in_channels}, {self.out_channels}, kernel={self.kernel}, "
            f"stride={self.stride}, padding={self.padding})"
        )


class Dense(Layer):
    decay = ("W",)

    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.params["W"] = he_uniform(rng, (self.in_features, self.out_features), self.in_features)
        self.params["b"] = np.zeros(self.out_features)

    def output_shape(self, shape):
        if len(shape) != 2 or shape[1] != self.in_features:
            raise ValueError(f"Dense expects (batch, {self.in_features}), got {shape}")
        return (shape[0], self.out_features)

    def forward(self, x, train=False, rng=None):
        self.output_shape(x.shape)
        if train:
            self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, grad):
        x = self._take_cache()
        self.grads["W"] = x.T @ grad
        self.grads["b"] = grad.sum(axis=0)
        return grad @ self.params["W"].T

    def __repr__(self):
        return f"Dense({self.in_features}, {self.out_features})"


class ReLU(Layer):
    def forward(self, x, train=False, rng=None):
        if train:
            self._cache = x > 0
        return np.maximum(x, 0.0)

    def backward(self, grad):
        return grad * self._take_cache()


class BatchNorm(Layer):
    """Per-channel normalisation over every axis except axis 1.

    Training mode uses batch statistics (biased variance) and updates the
    running estimates as ``running = momentum * running + (1 - momentum) * batch``.
    Evaluation mode uses the running estimates.
    """

    def __init__(self, channels, momentum=0.9, eps=1e-12):
        super().__init__()
        self.channels = int(channels)
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(self.channels)
        self.params["beta"] = np.zeros(self.channels)
        self.buffers["running_mean"] = np.zeros(self.channels)
        self.buffers["running_var"] = np.ones(self.channels)

    def _bshape(self, x):
        return (1, self.channels) + (1,) * (x.ndim - 2)

    def output_shape(self, shape):
        if len(shape) < 2 or shape[1] != self.channels:
            raise ValueError(f"BatchNorm expects {self.channels} channels, got shape {shape}")
        return shape

    def forward(self, x, train=False, rng=None):
        self.output_shape(x.shape)
        axes = (0,) + tuple(range(2, x.ndim))
        bs = self._bshape(x)
        gamma = self.params["gamma"].reshape(bs)
        beta = self.params["beta"].reshape(bs)
        if not train:
            mean = self.buffers["running_mean"].reshape(bs)
            var = self.buffers["running_var"].reshape(bs)
            return (x - mean) / np.sqrt(var + self.eps) * gamma + beta
        count = x.size // self.channels
        if count < 2:
            raise DegenerateInputError("batch norm needs more than one value per channel in training mode")
        mean = x.mean(axis=axes)
        xc = x - mean.reshape(bs)
        var = (xc * xc).mean(axis=axes)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv_std.reshape(bs)
        m = self.momentum
        self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mean
        self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
        self._cache = (xhat, inv_std, axes, count)
        return xhat * gamma + beta

    def backward(self, grad):
        xhat, inv_std, axes, count = self._take_cache()
        bs = self._bshape(grad)
        self.grads["gamma"] = (grad * xhat).sum(axis=axes)
        self.grads["beta"] = grad.sum(axis=axes)
        gx = grad * self.params["gamma"].reshape(bs)
        mean_g = gx.mean(axis=axes).reshape(bs)
        mean_gx = (gx * xhat).mean(axis=axes).reshape(bs)
        return (gx - mean_g - xhat * mean_gx) * inv_std.reshape(bs)

    def __repr__(self):
        return f"BatchNorm({self.channels})"


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` in training mode."""

    def __init__(self, rate):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = float(rate)

    def forward(self, x, train=False, rng=None):
        if not train:
            return x
        if self.rate == 0.0:
            self._cache = (None,)
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs a random generator")
        keep = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        self._cache = (keep,)
        return x * keep

    def backward(self, grad):
        (keep,) = self._take_cache()
        return grad if keep is None else grad * keep

    def __repr__(self):
        return f"Dropout({self.rate})"


class Flatten(Layer):
    def output_shape(self, shape):
        return (shape[0], int(np.prod(shape[1:])))

    def forward(self, x, train=False, rng=None):
        if train:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._take_cache())


class GlobalAvgPool(Layer):
    """Mean over all spatial axes: ``(B, C, *S) -> (B, C)``."""

    def output_shape(self, shape):
        return shape[:2]

    def forward(self, x, train=False, rng=None):
        if train:
            self._cache = x.shape
        return x.reshape(x.shape[0], x.shape[1], -1).mean(axis=2)

    def backward(self, grad):
        shape = self._take_cache()
        n = int(np.prod(shape[2:]))
        return np.broadcast_to((grad / n).reshape(shape[:2] + (1,) * (len(shape) - 2)), shape).copy()


class Sequential(Layer):
    """Layers applied in order."""

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return self.layers

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def forward(self, x, train=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, train, rng)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def __repr__(self):
        inner = ", ".join(repr(layer) for layer in self.layers)
        return f"Sequential({inner})"


class Bottleneck(Layer):
    """3-D bottleneck residual block.

    ``relu(branch(x) + shortcut(x))`` with ``branch`` = 1-conv, BN, ReLU,
    3-conv (stride, zero padding 1), BN, ReLU, 1-conv, BN. The shortcut is the
    identity when shapes agree and a strided 1-conv + BN projection otherwise.
    """

    def __init__(self, in_channels, width, expansion=4, stride=1, rng=None, rank=3):
        super().__init__()
        out_channels = width * expansion
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.branch = Sequential(
            [
                Conv(in_channels, width, 1, rank=rank, rng=rng, bias=False),
                BatchNorm(width),
                ReLU(),
                Conv(width, width, 3, rank=rank, stride=stride, padding=1, rng=rng, bias=False),
                BatchNorm(width),
                ReLU(),
                Conv(width, out_channels, 1, rank=rank, rng=rng, bias=False),
                BatchNorm(out_channels),
            ]
        )
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Sequential(
                [
                    Conv(in_channels, out_channels, 1, rank=rank, stride=stride, rng=rng, bias=False),
                    BatchNorm(out_channels),
                ]
            )
        else:
            self.shortcut = None
        self.relu = ReLU()

    def children(self):
        kids = [self.branch]
        if self.shortcut is not None:
            kids.append(self.shortcut)
        return kids + [self.relu]

    def output_shape(self, shape):
        out = self.branch.output_shape(shape)
        short = self.shortcut.output_shape(shape) if self.shortcut is not None else shape
        if out != short:
            raise ValueError(f"residual shapes disagree: {out} vs {short}")
        return out

    def forward(self, x, train=False, rng=None):
        out = self.branch.forward(x, train, rng)
        short = self.shortcut.forward(x, train, rng) if self.shortcut is not None else x
        return self.relu.forward(out + short, train, rng)

    def backward(self, grad):
        g = self.relu.backward(grad)
        gx = self.branch.backward(g)
        gx = gx + (self.shortcut.backward(g) if self.shortcut is not None else g)
        return gx

    def __repr__(self):
        return f"Bottleneck({self.in_channels}->{self.out_channels}, shortcut={'proj' if self.shortcut else 'id'})"
