"""Fixed small architectures with explicit backward passes.

Three wirings cover the whole pipeline: a two-level U-Net (denoiser),
an encoder/decoder pair (codec), and an encoder + pooled linear head
(classifier). Skip connections are additive so channel counts match and
gradients simply sum at the joins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    Conv3d,
    Dense,
    GlobalAvgPool,
    GroupNorm,
    NearestUp2,
    Param,
    SiLU,
    TimeBias,
    sinusoidal_time_embedding,
)

TIME_EMBED_DIM = 64


@dataclass(frozen=True)
class TensorGrid:
    """Batched activation carrier, shape (batch, channels, nx, ny, nz)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        if self.data.ndim != 5:
            raise ValueError(f"expected 5D (batch, C, X, Y, Z), got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("non-finite values in tensor grid")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape[1:]

    @property
    def batch(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 4
    epochs: int = 10
    patience: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


class ConvBlock:
    """(optional up) conv -> groupnorm -> (+ time bias) -> SiLU."""

    def __init__(self, c_in, c_out, rng, stride=1, up=False, time=False, dtype=np.float32, name="blk"):
        self.upsample = NearestUp2() if up else None
        self.conv = Conv3d(c_in, c_out, stride=stride, rng=rng, dtype=dtype, name=f"{name}.conv")
        self.norm = GroupNorm(c_out, dtype=dtype, name=f"{name}.norm")
        self.tbias = TimeBias(c_out, TIME_EMBED_DIM, rng=rng, dtype=dtype, name=f"{name}.time") if time else None
        self.act = SiLU()

    def params(self) -> list[Param]:
        out = self.conv.params() + self.norm.params()
        if self.tbias is not None:
            out += self.tbias.params()
        return out

    def forward(self, x, temb=None):
        if self.upsample is not None:
            x = self.upsample.forward(x)
        h = self.norm.forward(self.conv.forward(x))
        if self.tbias is not None:
            if temb is None:
                raise ValueError("this block is time-conditioned; pass a timestep")
            h = self.tbias.forward(h, temb)
        return self.act.forward(h)

    def backward(self, gout):
        g = self.act.backward(gout)
        if self.tbias is not None:
            g = self.tbias.backward(g)
        g = self.conv.backward(self.norm.backward(g))
        if self.upsample is not None:
            g = self.upsample.backward(g)
        return g


class Network:
    """Common parameter/optimizer bookkeeping for the fixed wirings."""

    arch_id: str = "net"

    def __init__(self, in_channels: int, time_conditioned: bool, dtype=np.float32):
        self.in_channels = in_channels
        self.time_conditioned = time_conditioned
        self.dtype = dtype
        self.adam_m: list[np.ndarray] | None = None
        self.adam_v: list[np.ndarray] | None = None
        self.adam_step_count = 0
        self._blocks: list = []

    def parameters(self) -> list[Param]:
        out = []
        for blk in self._blocks:
            out.extend(blk.params())
        return out

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad[...] = 0.0

    def _check_input(self, x: np.ndarray, spatial_multiple: int) -> np.ndarray:
        if isinstance(x, TensorGrid):
            x = x.data
        if x.ndim != 5:
            raise ValueError(f"expected 5D input, got shape {x.shape}")
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        if any(d % spatial_multiple for d in x.shape[2:]):
            raise ValueError(f"spatial dims {x.shape[2:]} must be multiples of {spatial_multiple}")
        return np.ascontiguousarray(x, dtype=self.dtype)

    def _embed(self, x: np.ndarray, t) -> np.ndarray | None:
        if not self.time_conditioned:
            return None
        if t is None:
            raise ValueError("this network is time-conditioned; pass t")
        temb = sinusoidal_time_embedding(t, TIME_EMBED_DIM, dtype=self.dtype)
        if temb.shape[0] == 1 and x.shape[0] > 1:
            temb = np.repeat(temb, x.shape[0], axis=0)
        if temb.shape[0] != x.shape[0]:
            raise ValueError("timestep batch does not match input batch")
        return temb

    def forward(self, x, t=None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, gout: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class UNet3D(Network):
    """Two-level additive-skip U-Net; zero-initialized output head."""

    def __init__(self, in_channels, out_channels, base_channels=16, time_conditioned=True, seed=0, dtype=np.float32):
        super().__init__(in_channels, time_conditioned, dtype)
        rng = np.random.default_rng(seed)
        c, t = base_channels, time_conditioned
        self.out_channels = out_channels
        self.base_channels = base_channels
        self.stem = ConvBlock(in_channels, c, rng, time=t, dtype=dtype, name="stem")
        self.down1 = ConvBlock(c, 2 * c, rng, stride=2, time=t, dtype=dtype, name="down1")
        self.down2 = ConvBlock(2 * c, 2 * c, rng, stride=2, time=t, dtype=dtype, name="down2")
        self.mid = ConvBlock(2 * c, 2 * c, rng, time=t, dtype=dtype, name="mid")
        self.up1 = ConvBlock(2 * c, 2 * c, rng, up=True, time=t, dtype=dtype, name="up1")
        self.up2 = ConvBlock(2 * c, c, rng, up=True, time=t, dtype=dtype, name="up2")
        self.head = Conv3d(c, out_channels, rng=rng, zero_init=True, dtype=dtype, name="head")
        self._blocks = [self.stem, self.down1, self.down2, self.mid, self.up1, self.up2]
        self.arch_id = f"unet3d:{in_channels}-{base_channels}-{out_channels}:t{int(t)}"
        self._did_forward = False

    def parameters(self) -> list[Param]:
        out = super().parameters()
        out.extend(self.head.params())
        return out

    def forward(self, x, t=None) -> np.ndarray:
        x = self._check_input(x, 4)
        temb = self._embed(x, t)
        h0 = self.stem.forward(x, temb)
        h1 = self.down1.forward(h0, temb)
        h2 = self.down2.forward(h1, temb)
        m = self.mid.forward(h2, temb)
        u1 = self.up1.forward(m, temb) + h1
        u2 = self.up2.forward(u1, temb) + h0
        self._did_forward = True
        return self.head.forward(u2)

    def backward(self, gout: np.ndarray) -> np.ndarray:
        if not self._did_forward:
            raise RuntimeError("backward called before forward")
        self._did_forward = False
        g_u2 = self.head.backward(np.ascontiguousarray(gout, dtype=self.dtype))
        g_h0_skip = g_u2
        g_u1 = self.up2.backward(g_u2)
        g_h1_skip = g_u1
        g_m = self.up1.backward(g_u1)
        g_h2 = self.mid.backward(g_m)
        g_h1 = self.down2.backward(g_h2) + g_h1_skip
        g_h0 = self.down1.backward(g_h1) + g_h0_skip
        return self.stem.backward(g_h0)


class Encoder3D(Network):
    """Two stride-2 stages; maps (in, n^3) to (out, (n/4)^3)."""

    def __init__(self, in_channels, out_channels, base_channels=16, time_conditioned=False, seed=0, dtype=np.float32):
        super().__init__(in_channels, time_conditioned, dtype)
        rng = np.random.default_rng(seed)
        c, t = base_channels, time_conditioned
        self.out_channels = out_channels
        self.base_channels = base_channels
        self.stem = ConvBlock(in_channels, c, rng, time=t, dtype=dtype, name="stem")
        self.down1 = ConvBlock(c, 2 * c, rng, stride=2, time=t, dtype=dtype, name="down1")
        self.down2 = ConvBlock(2 * c, 2 * c, rng, stride=2, time=t, dtype=dtype, name="down2")
        self.mid = ConvBlock(2 * c, 2 * c, rng, time=t, dtype=dtype, name="mid")
        self.head = Conv3d(2 * c, out_channels, rng=rng, dtype=dtype, name="head")
        self._blocks = [self.stem, self.down1, self.down2, self.mid]
        self.arch_id = f"enc3d:{in_channels}-{base_channels}-{out_channels}:t{int(t)}"
        self._did_forward = False

    def parameters(self) -> list[Param]:
        return super().parameters() + self.head.params()

    def forward(self, x, t=None) -> np.ndarray:
        x = self._check_input(x, 4)
        temb = self._embed(x, t)
        h = self.stem.forward(x, temb)
        h = self.down1.forward(h, temb)
        h = self.down2.forward(h, temb)
        h = self.mid.forward(h, temb)
        self._did_forward = True
        return self.head.forward(h)

    def backward(self, gout: np.ndarray) -> np.ndarray:
        if not self._did_forward:
            raise RuntimeError("backward called before forward")
        self._did_forward = False
        g = self.head.backward(np.ascontiguousarray(gout, dtype=self.dtype))
        g = self.mid.backward(g)
        g = self.down2.backward(g)
        g = self.down1.backward(g)
        return self.stem.backward(g)


class Decoder3D(Network):
    """Mirror of Encoder3D: two nearest-up stages back to full resolution."""

    def __init__(self, in_channels, out_channels, base_channels=16, seed=0, dtype=np.float32):
        super().__init__(in_channels, False, dtype)
        rng = np.random.default_rng(seed)
        c = base_channels
        self.out_channels = out_channels
        self.base_channels = base_channels
        self.stem = ConvBlock(in_channels, 2 * c, rng, dtype=dtype, name="stem")
        self.up1 = ConvBlock(2 * c, 2 * c, rng, up=True, dtype=dtype, name="up1")
        self.up2 = ConvBlock(2 * c, c, rng, up=True, dtype=dtype, name="up2")
        self.mid = ConvBlock(c, c, rng, dtype=dtype, name="mid")
        self.head = Conv3d(c, out_channels, rng=rng, dtype=dtype, name="head")
        self._blocks = [self.stem, self.up1, self.up2, self.mid]
        self.arch_id = f"dec3d:{in_channels}-{base_channels}-{out_channels}"
        self._did_forward = False

    def parameters(self) -> list[Param]:
        return super().parameters() + self.head.params()

    def forward(self, x, t=None) -> np.ndarray:
        x = self._check_input(x, 1)
        h = self.stem.forward(x)
        h = self.up1.forward(h)
        h = self.up2.forward(h)
        h = self.mid.forward(h)
        self._did_forward = True
        return self.head.forward(h)

    def backward(self, gout: np.ndarray) -> np.ndarray:
        if not self._did_forward:
            raise RuntimeError("backward called before forward")
        self._did_forward = False
        g = self.head.backward(np.ascontiguousarray(gout, dtype=self.dtype))
        g = self.mid.backward(g)
        g = self.up2.backward(g)
        g = self.up1.backward(g)
        return self.stem.backward(g)


class Classifier3D(Network):
    """Encoder path, global average pool, zero-initialized linear head.

    Returns out_features logits per sample, shape (batch, out_features).
    """

    def __init__(self, in_channels, base_channels=16, time_conditioned=True, seed=0,
                 dtype=np.float32, out_features=1):
        super().__init__(in_channels, time_conditioned, dtype)
        rng = np.random.default_rng(seed)
        c, t = base_channels, time_conditioned
        self.base_channels = base_channels
        self.out_features = out_features
        self.stem = ConvBlock(in_channels, c, rng, time=t, dtype=dtype, name="stem")
        self.down1 = ConvBlock(c, 2 * c, rng, stride=2, time=t, dtype=dtype, name="down1")
        self.down2 = ConvBlock(2 * c, 2 * c, rng, stride=2, time=t, dtype=dtype, name="down2")
        self.pool = GlobalAvgPool()
        self.headdense = Dense(2 * c, out_features, rng=rng, zero_init=True, dtype=dtype, name="head")
        self._blocks = [self.stem, self.down1, self.down2]
        self.arch_id = f"cls3d:{in_channels}-{base_channels}-{out_features}:t{int(t)}"
        self._did_forward = False

    def parameters(self) -> list[Param]:
        return super().parameters() + self.headdense.params()

    def forward(self, x, t=None) -> np.ndarray:
        x = self._check_input(x, 4)
        temb = self._embed(x, t)
        h = self.stem.forward(x, temb)
        h = self.down1.forward(h, temb)
        h = self.down2.forward(h, temb)
        h = self.pool.forward(h)
        self._did_forward = True
        return self.headdense.forward(h)

    def backward(self, gout: np.ndarray) -> np.ndarray:
        if not self._did_forward:
            raise RuntimeError("backward called before forward")
        self._did_forward = False
        g = self.headdense.backward(np.ascontiguousarray(gout, dtype=self.dtype))
        g = self.pool.backward(g)
        g = self.down2.backward(g)
        g = self.down1.backward(g)
        return self.stem.backward(g)


def forward(net: Network, x, t=None) -> np.ndarray:
    return net.forward(x, t)


def backward(net: Network, output_grad: np.ndarray) -> np.ndarray:
    return net.backward(output_grad)


def adam_step(net: Network, cfg) -> None:
    """One Adam update (beta1=0.9, beta2=0.999, eps=1e-8); clears gradients."""
    lr = cfg.learning_rate if hasattr(cfg, "learning_rate") else float(cfg)
    params = net.parameters()
    if net.adam_m is None:
        net.adam_m = [np.zeros_like(p.value) for p in params]
        net.adam_v = [np.zeros_like(p.value) for p in params]
    net.adam_step_count += 1
    t = net.adam_step_count
    b1, b2, eps = 0.9, 0.999, 1e-8
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, m, v in zip(params, net.adam_m, net.adam_v):
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * np.square(p.grad)
        p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.grad[...] = 0.0


def finite_difference_check(net: Network, x, t=None, eps=1e-3, max_entries=32, seed=0) -> float:
    """Max relative error of analytic parameter gradients vs central FD.

    The loss is a fixed random weighting of the outputs so gradients do
    not cancel. Checks up to max_entries scalar entries per parameter.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=net.dtype)

    out = net.forward(x, t)
    w = rng.uniform(0.5, 1.5, size=out.shape).astype(net.dtype)

    def loss() -> float:
        return float(np.sum(net.forward(x, t).astype(np.float64) * w))

    net.zero_grad()
    net.forward(x, t)
    net.backward(w)

    floor = 1e-1 if net.dtype == np.float32 else 1e-3
    worst = 0.0
    for p in net.parameters():
        flat_v = p.value.reshape(-1)
        flat_g = p.grad.reshape(-1)
        n = flat_v.size
        idxs = np.arange(n) if n <= max_entries else rng.choice(n, size=max_entries, replace=False)
        for i in idxs:
            orig = flat_v[i]
            flat_v[i] = orig + eps
            lp = loss()
            flat_v[i] = orig - eps
            lm = loss()
            flat_v[i] = orig
            fd = (lp - lm) / (2.0 * eps)
            a = float(flat_g[i])
            rel = abs(a - fd) / max(abs(a), abs(fd), floor)
            worst = max(worst, rel)
    net.zero_grad()
    return worst
