"""Layers with hand-written forward and backward passes.

Every layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``self.grads`` (same keys and shapes
as ``self.params``).  Inputs follow the [N, C, T] convention except
:class:`Linear` ([N, D]) and :class:`ContextAttention` ([N, T, D]).
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.training = True

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state that still belongs in a checkpoint."""
        return {}

    def astype(self, dtype):
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        self.zero_grad()
        return self

    def __call__(self, x):
        return self.forward(x)


class Conv1d(Layer):
    """Stride-1 cross-correlation with "same" zero padding."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError("kernel size must be odd for same padding")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels, self.kernel_size = in_channels, out_channels, kernel_size
        fan_in, fan_out = in_channels * kernel_size, out_channels * kernel_size
        self.params["weight"] = glorot_uniform(
            rng, (out_channels, in_channels, kernel_size), fan_in, fan_out, dtype
        )
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)
        self.zero_grad()

    def _columns(self, x):
        n, c, t = x.shape
        pad = self.kernel_size // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
        # [N, T, C, K] so that rows are time steps and columns match weight.reshape(O, C*K)
        cols = np.stack([xp[:, :, k:k + t] for k in range(self.kernel_size)], axis=-1)
        return cols.transpose(0, 2, 1, 3).reshape(n, t, c * self.kernel_size)

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ShapeError(f"conv1d expects [N, {self.in_channels}, T], got {x.shape}")
        self._x_shape = x.shape
        self._cols = self._columns(x)
        w = self.params["weight"].reshape(self.out_channels, -1)
        out = self._cols @ w.T + self.params["bias"]
        return np.ascontiguousarray(out.transpose(0, 2, 1))

    def backward(self, grad_out):
        n, c, t = self._x_shape
        k = self.kernel_size
        g = grad_out.transpose(0, 2, 1)  # [N, T, O]
        w = self.params["weight"].reshape(self.out_channels, -1)
        dw = np.tensordot(g, self._cols, axes=([0, 1], [0, 1]))
        self.grads["weight"] += dw.reshape(self.params["weight"].shape)
        self.grads["bias"] += g.sum(axis=(0, 1))
        dcols = (g @ w).reshape(n, t, c, k).transpose(0, 2, 3, 1)  # [N, C, K, T]
        pad = k // 2
        dxp = np.zeros((n, c, t + 2 * pad), dtype=grad_out.dtype)
        for j in range(k):
            dxp[:, :, j:j + t] += dcols[:, :, j, :]
        return dxp[:, :, pad:pad + t]


class BatchNorm1d(Layer):
    """Per-channel normalization over (N, T) with learnable scale and shift."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float32):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.params["scale"] = np.ones(channels, dtype=dtype)
        self.params["shift"] = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.updates = 0
        self.zero_grad()

    def buffers(self):
        return {
            "running_mean": self.running_mean,
            "running_var": self.running_var,
            "updates": np.array([self.updates], dtype=self.running_mean.dtype),
        }

    def astype(self, dtype):
        super().astype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)
        return self

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm expects [N, {self.channels}, T], got {x.shape}")
        scale = self.params["scale"][None, :, None]
        shift = self.params["shift"][None, :, None]
        if self.training:
            mean = x.mean(axis=(0, 2))
            var = x.var(axis=(0, 2))
            m = x.shape[0] * x.shape[2]
            unbiased = var * (m / (m - 1)) if m > 1 else var
            self.running_mean = ((1 - self.momentum) * self.running_mean + self.momentum * mean).astype(
                self.running_mean.dtype)
            self.running_var = ((1 - self.momentum) * self.running_var + self.momentum * unbiased).astype(
                self.running_var.dtype)
            self.updates += 1
        else:
            if self.updates == 0:
                raise RuntimeError("batchnorm running statistics are uninitialized; run a training step first")
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
        self._xhat, self._inv_std = xhat, inv_std
        return xhat * scale + shift

    def backward(self, grad_out):
        xhat, inv_std = self._xhat, self._inv_std
        self.grads["scale"] += (grad_out * xhat).sum(axis=(0, 2))
        self.grads["shift"] += grad_out.sum(axis=(0, 2))
        dxhat = grad_out * self.params["scale"][None, :, None]
        if not self.training:
            return dxhat * inv_std[None, :, None]
        m = grad_out.shape[0] * grad_out.shape[2]
        mean_dxhat = dxhat.sum(axis=(0, 2), keepdims=True) / m
        mean_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2), keepdims=True) / m
        return (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_std[None, :, None]


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, grad_out):
        return grad_out * self._mask


class Identity(Layer):
    def forward(self, x):
        return x

    def backward(self, grad_out):
        return grad_out


class Tanh(Layer):
    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, grad_out):
        return grad_out * (1 - self._y ** 2)


ACTIVATIONS = {"relu": ReLU, "tanh": Tanh, "identity": Identity}


class MaxPool1d(Layer):
    """Non-overlapping max pooling; trailing frames that do not fill a window are dropped."""

    def __init__(self, window: int):
        super().__init__()
        if window < 1:
            raise ValueError("pooling window must be >= 1")
        self.window = window

    def forward(self, x):
        n, c, t = x.shape
        w = self.window
        t_out = t // w
        self._x_shape = x.shape
        windows = x[:, :, :t_out * w].reshape(n, c, t_out, w)
        # argmax returns the first maximum, which is where the gradient goes
        self._arg = windows.argmax(axis=-1)
        return np.take_along_axis(windows, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, grad_out):
        n, c, t = self._x_shape
        w = self.window
        t_out = t // w
        dwin = np.zeros((n, c, t_out, w), dtype=grad_out.dtype)
        np.put_along_axis(dwin, self._arg[..., None], grad_out[..., None], axis=-1)
        dx = np.zeros(self._x_shape, dtype=grad_out.dtype)
        dx[:, :, :t_out * w] = dwin.reshape(n, c, t_out * w)
        return dx


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.params["weight"] = glorot_uniform(rng, (out_features, in_features), in_features, out_features, dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)
        self.zero_grad()

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"linear expects [N, {self.in_features}], got {x.shape}")
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad_out):
        self.grads["weight"] += grad_out.T @ self._x
        self.grads["bias"] += grad_out.sum(axis=0)
        return grad_out @ self.params["weight"]


class ContextAttention(Layer):
    """Multi-head attention pooling with learned context vectors as queries.

    keys = tanh(x W^T + b); per head h the score of frame t is u_h . keys[t, h],
    the weights are a softmax over t and the head output is the weighted sum of
    that head's slice of x.  Heads are concatenated back to D channels.
    """

    def __init__(self, dim: int, heads: int = 8, rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        if dim % heads != 0:
            raise ShapeError(f"dimension {dim} is not divisible by {heads} heads")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim, self.heads, self.head_dim = dim, heads, dim // heads
        self.params["weight"] = glorot_uniform(rng, (dim, dim), dim, dim, dtype)
        self.params["bias"] = np.zeros(dim, dtype=dtype)
        self.params["context"] = (rng.standard_normal((heads, self.head_dim)) / np.sqrt(self.head_dim)).astype(dtype)
        self.zero_grad()

    def forward(self, x):
        if x.ndim != 3 or x.shape[2] != self.dim:
            raise ShapeError(f"context attention expects [N, T, {self.dim}], got {x.shape}")
        if x.shape[1] < 1:
            raise ShapeError("context attention needs at least one frame")
        n, t, d = x.shape
        h, dh = self.heads, self.head_dim
        keys = np.tanh(x @ self.params["weight"].T + self.params["bias"])
        kh = keys.reshape(n, t, h, dh)
        xh = x.reshape(n, t, h, dh)
        scores = np.einsum("nthd,hd->nth", kh, self.params["context"])
        scores = scores - scores.max(axis=1, keepdims=True)
        e = np.exp(scores)
        alpha = e / e.sum(axis=1, keepdims=True)
        out = np.einsum("nth,nthd->nhd", alpha, xh).reshape(n, d)
        self._cache = (x, keys, alpha)
        return out

    @property
    def last_weights(self) -> np.ndarray:
        """Attention weights [N, T, heads] of the most recent forward pass."""
        return self._cache[2]

    def backward(self, grad_out):
        x, keys, alpha = self._cache
        n, t, d = x.shape
        h, dh = self.heads, self.head_dim
        g = grad_out.reshape(n, h, dh)
        xh = x.reshape(n, t, h, dh)
        kh = keys.reshape(n, t, h, dh)
        dx = np.einsum("nth,nhd->nthd", alpha, g).reshape(n, t, d)
        dalpha = np.einsum("nhd,nthd->nth", g, xh)
        dscores = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
        self.grads["context"] += np.einsum("nth,nthd->hd", dscores, kh)
        dkeys = np.einsum("nth,hd->nthd", dscores, self.params["context"]).reshape(n, t, d)
        dz = dkeys * (1.0 - keys ** 2)
        self.grads["weight"] += np.einsum("nti,ntj->ij", dz, x)
        self.grads["bias"] += dz.sum(axis=(0, 1))
        dx += dz @ self.params["weight"]
        return dx
