"""Hand-derived 3D layers: forward passes cache what backward needs.

All activations are (batch, channels, nx, ny, nz) arrays. Convolutions
use replicate padding and a 3x3x3 kernel realized as 27 BLAS matmuls.
"""

from __future__ import annotations

import math

import numpy as np


class Param:
    """One trainable tensor with its accumulated gradient."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return self.value.size


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sinusoidal_time_embedding(t, dim: int = 64, dtype=np.float32) -> np.ndarray:
    """Transformer-style embedding of scalar timesteps, shape (batch, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / (half - 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


class Conv3d:
    """k=3 convolution, replicate padding, stride 1 or 2."""

    def __init__(self, c_in, c_out, stride=1, rng=None, zero_init=False, dtype=np.float32, name="conv"):
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        if zero_init:
            w = np.zeros((c_out, c_in, 3, 3, 3), dtype=dtype)
        else:
            std = math.sqrt(2.0 / (c_in * 27))
            w = (rng.normal(0.0, std, (c_out, c_in, 3, 3, 3))).astype(dtype)
        self.w = Param(f"{name}.w", w)
        self.b = Param(f"{name}.b", np.zeros(c_out, dtype=dtype))
        self._cache = None

    def params(self):
        return [self.w, self.b]

    def _out_dims(self, dims):
        if self.stride == 1:
            return dims
        return tuple((d - 1) // 2 + 1 for d in dims)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.c_in:
            raise ValueError(f"expected {self.c_in} channels, got {x.shape[1]}")
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)), mode="edge")
        dims = x.shape[2:]
        od = self._out_dims(dims)
        out = np.zeros((x.shape[0], self.c_out, *od), dtype=x.dtype)
        s = self.stride
        views = {}
        for di in range(3):
            for dj in range(3):
                for dk in range(3):
                    v = xp[
                        :,
                        :,
                        di : di + s * (od[0] - 1) + 1 : s,
                        dj : dj + s * (od[1] - 1) + 1 : s,
                        dk : dk + s * (od[2] - 1) + 1 : s,
                    ]
                    views[(di, dj, dk)] = v
                    part = np.tensordot(self.w.value[:, :, di, dj, dk], v, axes=([1], [1]))
                    out += np.moveaxis(part, 1, 0)
        out += self.b.value[None, :, None, None, None]
        self._cache = (x.shape, xp.shape, views)
        return out

    def backward(self, gout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        x_shape, xp_shape, views = self._cache
        s = self.stride
        od = gout.shape[2:]
        gxp = np.zeros(xp_shape, dtype=gout.dtype)
        for (di, dj, dk), v in views.items():
            self.w.grad[:, :, di, dj, dk] += np.tensordot(gout, v, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
            gpart = np.tensordot(self.w.value[:, :, di, dj, dk], gout, axes=([0], [1]))
            gxp[
                :,
                :,
                di : di + s * (od[0] - 1) + 1 : s,
                dj : dj + s * (od[1] - 1) + 1 : s,
                dk : dk + s * (od[2] - 1) + 1 : s,
            ] += np.moveaxis(gpart, 1, 0)
        self.b.grad += gout.sum(axis=(0, 2, 3, 4))
        # fold replicate-padding gradients back onto the border, axis by axis
        for axis in (2, 3, 4):
            lead = gxp.take(0, axis=axis)
            trail = gxp.take(gxp.shape[axis] - 1, axis=axis)
            gxp = gxp.take(range(1, gxp.shape[axis] - 1), axis=axis)
            first = [slice(None)] * gxp.ndim
            first[axis] = 0
            last = [slice(None)] * gxp.ndim
            last[axis] = gxp.shape[axis] - 1
            gxp[tuple(first)] += lead
            gxp[tuple(last)] += trail
        self._cache = None
        return gxp


class GroupNorm:
    def __init__(self, channels, groups=None, eps=1e-5, dtype=np.float32, name="gn"):
        self.channels = channels
        self.groups = min(8, channels) if groups is None else groups
        if channels % self.groups != 0:
            raise ValueError(f"channels {channels} not divisible by groups {self.groups}")
        self.eps = eps
        self.gamma = Param(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Param(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, c = x.shape[:2]
        g = self.groups
        xg = x.reshape(b, g, -1)
        mu = xg.mean(axis=2, keepdims=True)
        var = xg.var(axis=2, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = ((xg - mu) * inv).reshape(x.shape)
        self._cache = (xhat, inv.astype(x.dtype))
        return xhat * self.gamma.value[None, :, None, None, None] + self.beta.value[None, :, None, None, None]

    def backward(self, gout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        xhat, inv = self._cache
        b, c = gout.shape[:2]
        g = self.groups
        self.gamma.grad += (gout * xhat).sum(axis=(0, 2, 3, 4))
        self.beta.grad += gout.sum(axis=(0, 2, 3, 4))
        dxhat = (gout * self.gamma.value[None, :, None, None, None]).reshape(b, g, -1)
        xh = xhat.reshape(b, g, -1)
        m1 = dxhat.mean(axis=2, keepdims=True)
        m2 = (dxhat * xh).mean(axis=2, keepdims=True)
        dx = inv * (dxhat - m1 - xh * m2)
        self._cache = None
        return dx.reshape(gout.shape)


class SiLU:
    def __init__(self):
        self._cache = None

    def params(self):
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        sig = _sigmoid(x)
        self._cache = (x, sig)
        return x * sig

    def backward(self, gout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        x, sig = self._cache
        self._cache = None
        return gout * (sig * (1.0 + x * (1.0 - sig)))


class NearestUp2:
    """Nearest-neighbour doubling along each spatial axis."""

    def params(self):
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        out = np.repeat(np.repeat(np.repeat(x, 2, axis=2), 2, axis=3), 2, axis=4)
        self._in_shape = x.shape
        return out

    def backward(self, gout: np.ndarray) -> np.ndarray:
        b, c, x2, y2, z2 = gout.shape
        return gout.reshape(b, c, x2 // 2, 2, y2 // 2, 2, z2 // 2, 2).sum(axis=(3, 5, 7))


class TimeBias:
    """Linear map from a time embedding to a per-channel additive bias."""

    def __init__(self, channels, emb_dim=64, rng=None, dtype=np.float32, name="tbias"):
        std = math.sqrt(1.0 / emb_dim)
        self.w = Param(f"{name}.w", rng.normal(0.0, std, (emb_dim, channels)).astype(dtype))
        self.b = Param(f"{name}.b", np.zeros(channels, dtype=dtype))
        self.emb_dim = emb_dim
        self._cache = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x: np.ndarray, temb: np.ndarray) -> np.ndarray:
        bias = temb @ self.w.value + self.b.value
        self._cache = temb
        return x + bias[:, :, None, None, None]

    def backward(self, gout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        temb = self._cache
        gsum = gout.sum(axis=(2, 3, 4))
        self.w.grad += temb.T @ gsum
        self.b.grad += gsum.sum(axis=0)
        self._cache = None
        return gout


class Dense:
    def __init__(self, f_in, f_out, rng=None, zero_init=False, dtype=np.float32, name="dense"):
        if zero_init:
            w = np.zeros((f_in, f_out), dtype=dtype)
        else:
            std = math.sqrt(2.0 / f_in)
            w = rng.normal(0.0, std, (f_in, f_out)).astype(dtype)
        self.w = Param(f"{name}.w", w)
        self.b = Param(f"{name}.b", np.zeros(f_out, dtype=dtype))
        self._cache = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x
        return x @ self.w.value + self.b.value

    def backward(self, gout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        x = self._cache
        self.w.grad += x.T @ gout
        self.b.grad += gout.sum(axis=0)
        self._cache = None
        return gout @ self.w.value.T


class GlobalAvgPool:
    """(B, C, X, Y, Z) -> (B, C) spatial mean."""

    def params(self):
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._shape = x.shape
        return x.mean(axis=(2, 3, 4))

    def backward(self, gout: np.ndarray) -> np.ndarray:
        b, c, x, y, z = self._shape
        n = x * y * z
        return np.broadcast_to(gout[:, :, None, None, None] / n, self._shape).astype(gout.dtype).copy()
