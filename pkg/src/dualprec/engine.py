"""Minimal reverse-mode network core on numpy arrays.

Layers implement `forward(x, train) -> (y, cache)` and
`backward(dy, cache) -> (dx, param_grads)`. Caches capture everything the
backward pass needs, including the weight array actually used in the
forward, so a layer's weights can be swapped between passes (the dual
trainer runs the same network at two effective precisions per batch) and
each recorded tape still differentiates correctly.

Tensors are plain row-major numpy arrays throughout.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class EngineError(Exception):
    """Shape mismatch or non-finite value inside the network."""


def fan_in_uniform(shape: tuple, fan_in: int, rng: np.random.Generator, dtype=np.float32):
    """Uniform init with He-style fan-in bounds +-sqrt(6/fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Dense:
    """Fully connected layer, weight shape (out_features, in_features)."""

    kind = "dense"
    has_weight = True

    def __init__(self, name, in_features, out_features, rng, dtype=np.float32):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        self.weight = fan_in_uniform((out_features, in_features), in_features, rng, dtype)
        self.bias = np.zeros(out_features, dtype=dtype)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, train):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise EngineError(
                f"shape mismatch at layer {self.name}: expected (*, {self.in_features}), "
                f"got {x.shape}"
            )
        return x @ self.weight.T + self.bias, (x, self.weight)

    def backward(self, dy, cache):
        x, w = cache
        return dy @ w, {"weight": dy.T @ x, "bias": dy.sum(axis=0)}


class Conv2d:
    """3x3-style 2-D convolution, stride 1, weight shape (out, in, kh, kw)."""

    kind = "conv2d"
    has_weight = True

    def __init__(self, name, in_channels, out_channels, kernel_size=3, padding=1,
                 rng=None, dtype=np.float32):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = fan_in_uniform(
            (out_channels, in_channels, kernel_size, kernel_size), fan_in, rng, dtype
        )
        self.bias = np.zeros(out_channels, dtype=dtype)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def _pad(self, x):
        p = self.padding
        if p == 0:
            return x
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))

    def forward(self, x, train):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise EngineError(
                f"shape mismatch at layer {self.name}: expected (*, {self.in_channels}, h, w), "
                f"got {x.shape}"
            )
        w = self.weight
        xp = self._pad(x)
        win = sliding_window_view(xp, (self.kernel_size, self.kernel_size), axis=(2, 3))
        # win: (n, c, oh, ow, kh, kw); contract c, kh, kw against the kernel
        y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
        y = np.ascontiguousarray(y.transpose(0, 3, 1, 2)) + self.bias[None, :, None, None]
        return y, (xp, w, x.shape)

    def backward(self, dy, cache):
        xp, w, x_shape = cache
        k, p = self.kernel_size, self.padding
        win = sliding_window_view(xp, (k, k), axis=(2, 3))
        dw = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))
        db = dy.sum(axis=(0, 2, 3))
        oh, ow = dy.shape[2], dy.shape[3]
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                # (n, o, oh, ow) x (o, c) -> (n, c, oh, ow)
                dxp[:, :, i:i + oh, j:j + ow] += np.einsum(
                    "nohw,oc->nchw", dy, w[:, :, i, j], optimize=True
                )
        if p:
            dx = dxp[:, :, p:-p, p:-p]
        else:
            dx = dxp
        return dx, {"weight": dw.astype(w.dtype, copy=False), "bias": db}


class BatchNorm2d:
    """Per-channel batch normalization over (n, h, w).

    Train mode normalizes with batch statistics and, while `track_stats` is
    on, folds them into the running estimates; eval mode is a pure function
    of the running estimates.
    """

    kind = "batchnorm"
    has_weight = False

    def __init__(self, name, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.name = name
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.track_stats = True

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, train):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise EngineError(
                f"shape mismatch at layer {self.name}: expected (*, {self.channels}, h, w), "
                f"got {x.shape}"
            )
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if self.track_stats:
                m = x.shape[0] * x.shape[2] * x.shape[3]
                unbiased = var * (m / max(m - 1, 1))
                mom = self.momentum
                self.running_mean[...] = (1 - mom) * self.running_mean + mom * mean
                self.running_var[...] = (1 - mom) * self.running_var + mom * unbiased
        else:
            mean = self.running_mean
            var = self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        y = self.gamma[None, :, None, None] * xhat + self.beta[None, :, None, None]
        return y, (xhat, inv, self.gamma, train)

    def backward(self, dy, cache):
        xhat, inv, gamma, train = cache
        dgamma = (dy * xhat).sum(axis=(0, 2, 3))
        dbeta = dy.sum(axis=(0, 2, 3))
        dxhat = dy * gamma[None, :, None, None]
        if not train:
            return dxhat * inv[None, :, None, None], {"gamma": dgamma, "beta": dbeta}
        m = dy.shape[0] * dy.shape[2] * dy.shape[3]
        sum_dxhat = dxhat.sum(axis=(0, 2, 3))
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))
        dx = (inv[None, :, None, None] / m) * (
            m * dxhat
            - sum_dxhat[None, :, None, None]
            - xhat * sum_dxhat_xhat[None, :, None, None]
        )
        return dx, {"gamma": dgamma, "beta": dbeta}


class ReLU:
    kind = "relu"
    has_weight = False

    def __init__(self, name):
        self.name = name

    def params(self):
        return {}

    def forward(self, x, train):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache):
        return dy * cache, {}


class MaxPool2d:
    """2x2 max pooling with stride 2; spatial dims must be even."""

    kind = "maxpool"
    has_weight = False

    def __init__(self, name):
        self.name = name

    def params(self):
        return {}

    def forward(self, x, train):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise EngineError(f"shape mismatch at layer {self.name}: odd spatial dims {x.shape}")
        xr = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        xr = xr.reshape(n, c, h // 2, w // 2, 4)
        arg = xr.argmax(axis=-1)
        y = np.take_along_axis(xr, arg[..., None], axis=-1)[..., 0]
        return y, (arg, x.shape)

    def backward(self, dy, cache):
        arg, x_shape = cache
        n, c, h, w = x_shape
        dxr = np.zeros((n, c, h // 2, w // 2, 4), dtype=dy.dtype)
        np.put_along_axis(dxr, arg[..., None], dy[..., None], axis=-1)
        dx = dxr.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return dx.reshape(n, c, h, w), {}


class Flatten:
    kind = "flatten"
    has_weight = False

    def __init__(self, name):
        self.name = name

    def params(self):
        return {}

    def forward(self, x, train):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache):
        return dy.reshape(cache), {}


class Network:
    """Ordered layer stack with taped forward/backward."""

    def __init__(self, layers):
        self.layers = list(layers)
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names: {names}")

    def __iter__(self):
        return iter(self.layers)

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def weight_layers(self):
        return [l for l in self.layers if l.has_weight]

    def params(self):
        """Flat view of trainable parameters keyed '<layer>.<param>'."""
        out = {}
        for l in self.layers:
            for pname, arr in l.params().items():
                out[f"{l.name}.{pname}"] = arr
        return out

    def forward(self, x, train=False):
        """Run the stack; returns (logits, tape) for a later backward pass."""
        h = np.asarray(x)
        tape = []
        for i, layer in enumerate(self.layers):
            h, cache = layer.forward(h, train)
            if not np.all(np.isfinite(h)):
                raise EngineError(f"numeric overflow at layer {i} ({layer.name})")
            tape.append(cache)
        return h, tape

    def backward(self, dlogits, tape):
        """Reverse-mode sweep over a recorded tape; returns flat gradients."""
        grads = {}
        d = dlogits
        for layer, cache in zip(reversed(self.layers), reversed(tape)):
            d, pgrads = layer.backward(d, cache)
            for pname, g in pgrads.items():
                grads[f"{layer.name}.{pname}"] = g
        return grads


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. logits.

    Numerically stabilized with log-sum-exp, so saturated logits stay finite.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    n, classes = logits.shape
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError("label out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(n), labels]))
    probs = np.exp(shifted - lse[:, None])
    probs[np.arange(n), labels] -= 1.0
    return loss, probs / n


def accuracy(logits, labels):
    """Top-1 accuracy in [0, 1]."""
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))
