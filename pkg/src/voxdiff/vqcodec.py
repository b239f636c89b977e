"""Vector-quantized autoencoder: the latent space for diffusion and guidance.

The quantizer snaps each latent site to its nearest code; training uses the
straight-through estimator, so the decoder's input gradient reaches the
encoder unchanged while the codebook is pulled toward the encoder outputs.
An identity mode bypasses the networks entirely for pixel-space testing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffnet.layers import Conv3d, Param, SiLU
from .diffnet.network import Decoder3D, Encoder3D, Network, TrainConfig, adam_step
from .diffnet.checkpoint import load_network, save_network
from .volgrid import Volume


@dataclass(frozen=True)
class CodecConfig:
    levels: int = 2
    latent_dim: int = 8
    codebook_size: int = 64
    base_channels: int = 8
    beta_commit: float = 0.25
    identity: bool = False
    use_discriminator: bool = False
    gan_weight: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.levels != 2:
            raise ValueError("only levels=2 is wired (4x spatial compression)")
        if self.latent_dim < 1 or self.codebook_size < 2:
            raise ValueError("need latent_dim >= 1 and codebook_size >= 2")
        if self.beta_commit < 0 or self.gan_weight < 0:
            raise ValueError("loss weights must be nonnegative")

    @property
    def factor(self) -> int:
        return 2**self.levels


class Codebook:
    """K x D code table with usage counters updated on quantization."""

    def __init__(self, k: int, d: int, rng: np.random.Generator):
        if k < 2:
            raise ValueError("codebook needs at least 2 entries")
        self.entries = Param("codebook", rng.normal(0.0, 0.3, (k, d)).astype(np.float32))
        self.usage = np.zeros(k, dtype=np.int64)

    @property
    def k(self) -> int:
        return self.entries.value.shape[0]

    @property
    def d(self) -> int:
        return self.entries.value.shape[1]

    def squared_distances(self, flat: np.ndarray) -> np.ndarray:
        """(N, D) sites -> (N, K) squared Euclidean distances."""
        diff = flat[:, None, :] - self.entries.value[None, :, :]
        return np.einsum("nkd,nkd->nk", diff, diff)

    def nearest(self, flat: np.ndarray) -> np.ndarray:
        # argmin returns the first minimum, so ties go to the lowest index
        return np.argmin(self.squared_distances(flat), axis=1).astype(np.int32)

    def reset_usage(self) -> None:
        self.usage[...] = 0

    def codes_in_use(self) -> int:
        return int((self.usage > 0).sum())


@dataclass(frozen=True)
class LatentGrid:
    """Continuous latent plus (optionally) its quantization."""

    continuous: np.ndarray  # (D, x, y, z)
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    indices: np.ndarray | None = None  # (x, y, z) int32
    quantized: np.ndarray | None = None  # (D, x, y, z)

    def __post_init__(self) -> None:
        if self.continuous.ndim != 4:
            raise ValueError(f"latent must be (D, x, y, z), got {self.continuous.shape}")
        if self.indices is not None and self.indices.shape != self.continuous.shape[1:]:
            raise ValueError("index grid does not match latent spatial dims")

    @property
    def channels(self) -> int:
        return self.continuous.shape[0]

    @property
    def spatial_dims(self) -> tuple[int, int, int]:
        return self.continuous.shape[1:]

    @property
    def values(self) -> np.ndarray:
        """Quantized values when available, else the continuous latent."""
        return self.quantized if self.quantized is not None else self.continuous


class VQCodec(Network):
    """Encoder, decoder, and codebook behind one checkpointable facade."""

    def __init__(self, cfg: CodecConfig = CodecConfig()):
        super().__init__(1, False)
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        if not cfg.identity:
            self.encoder = Encoder3D(1, cfg.latent_dim, cfg.base_channels, seed=cfg.seed)
            self.decoder = Decoder3D(cfg.latent_dim, 1, cfg.base_channels, seed=cfg.seed + 1)
            self.codebook = Codebook(cfg.codebook_size, cfg.latent_dim, rng)
            self.discriminator = (
                PatchDiscriminator(cfg.base_channels, seed=cfg.seed + 2) if cfg.use_discriminator else None
            )
        else:
            self.encoder = self.decoder = self.codebook = self.discriminator = None
        self.arch_id = (
            "vqcodec:identity"
            if cfg.identity
            else f"vqcodec:{cfg.levels}l-d{cfg.latent_dim}-k{cfg.codebook_size}-c{cfg.base_channels}"
        )

    def parameters(self) -> list[Param]:
        if self.cfg.identity:
            return []
        return self.encoder.parameters() + self.decoder.parameters()


class PatchDiscriminator(Network):
    """Three strided convs with SiLU; emits a grid of patch logits."""

    def __init__(self, base_channels=8, seed=0):
        super().__init__(1, False)
        rng = np.random.default_rng(seed)
        c = base_channels
        self.conv1 = Conv3d(1, c, stride=2, rng=rng, name="d1")
        self.act1 = SiLU()
        self.conv2 = Conv3d(c, 2 * c, stride=2, rng=rng, name="d2")
        self.act2 = SiLU()
        self.conv3 = Conv3d(2 * c, 1, rng=rng, name="d3")
        self._layers = [self.conv1, self.act1, self.conv2, self.act2, self.conv3]
        self.arch_id = f"patchdisc:{base_channels}"
        self._did_forward = False

    def parameters(self) -> list[Param]:
        return self.conv1.params() + self.conv2.params() + self.conv3.params()

    def forward(self, x, t=None) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=self.dtype)
        for layer in self._layers:
            x = layer.forward(x)
        self._did_forward = True
        return x

    def backward(self, gout: np.ndarray) -> np.ndarray:
        if not self._did_forward:
            raise RuntimeError("backward called before forward")
        self._did_forward = False
        g = np.ascontiguousarray(gout, dtype=self.dtype)
        for layer in reversed(self._layers):
            g = layer.backward(g)
        return g


def encode(codec: VQCodec, vol: Volume) -> LatentGrid:
    """Continuous latent of a [-1, 1] volume; dims must divide by 2^levels."""
    f = codec.cfg.factor
    if any(d % f for d in vol.dims):
        raise ValueError(f"volume dims {vol.dims} not divisible by {f}")
    data = vol.data
    if data.min() < -1.0 - 1e-6 or data.max() > 1.0 + 1e-6:
        raise ValueError("encode expects intensities in [-1, 1]")
    if codec.cfg.identity:
        z = data.astype(np.float32)[None]
    else:
        z = codec.encoder.forward(data.astype(np.float32)[None, None])[0]
    return LatentGrid(z, vol.spacing, vol.origin)


def quantize(codebook: Codebook, latent: LatentGrid) -> LatentGrid:
    """Nearest-code assignment per site; ties break to the lowest index."""
    if codebook is None:
        raise ValueError("no codebook (identity codec?)")
    z = latent.continuous
    if z.shape[0] != codebook.d:
        raise ValueError(f"latent has {z.shape[0]} channels, codebook dim is {codebook.d}")
    flat = z.reshape(z.shape[0], -1).T
    idx = codebook.nearest(flat)
    np.add.at(codebook.usage, idx, 1)
    e = codebook.entries.value[idx].T.reshape(z.shape)
    return LatentGrid(
        z,
        latent.spacing,
        latent.origin,
        indices=idx.reshape(z.shape[1:]),
        quantized=e,
    )


def decode(codec: VQCodec, latent: LatentGrid) -> Volume:
    """Decode (quantized if present) latent; output clamped to [-1, 1]."""
    values = latent.values
    if codec.cfg.identity:
        out = values[0]
    else:
        if values.shape[0] != codec.cfg.latent_dim:
            raise ValueError(
                f"latent has {values.shape[0]} channels, codec expects {codec.cfg.latent_dim}"
            )
        out = codec.decoder.forward(values.astype(np.float32)[None])[0, 0]
    return Volume(np.clip(out, -1.0, 1.0), latent.spacing, latent.origin)


def vq_losses(x: np.ndarray, z: np.ndarray, e: np.ndarray, recon: np.ndarray, beta_commit: float = 0.25) -> dict:
    """The three VQ training terms, each an element-wise mean."""
    rec = float(np.mean((recon - x) ** 2))
    cb = float(np.mean((z - e) ** 2))
    return {
        "reconstruction": rec,
        "codebook": cb,
        "commitment": beta_commit * cb,
        "total": rec + cb + beta_commit * cb,
    }


def _hinge_d(real_logits: np.ndarray, fake_logits: np.ndarray) -> float:
    return float(np.mean(np.maximum(0.0, 1.0 - real_logits)) + np.mean(np.maximum(0.0, 1.0 + fake_logits)))


def codec_train_step(codec: VQCodec, batch: np.ndarray, cfg: TrainConfig) -> dict:
    """One straight-through VQ step (plus optional hinge-GAN terms).

    batch: (B, 1, X, Y, Z) array of [-1, 1] volumes. Returns the losses
    evaluated before the update.
    """
    if codec.cfg.identity:
        raise ValueError("identity codec has no trainable parameters")
    if batch.ndim != 5 or batch.shape[0] < 1:
        raise ValueError("batch must be nonempty (B, 1, X, Y, Z)")
    x = np.ascontiguousarray(batch, dtype=np.float32)
    b = x.shape[0]

    z = codec.encoder.forward(x)
    flat = np.moveaxis(z, 1, -1).reshape(-1, codec.cfg.latent_dim)
    idx = codec.codebook.nearest(flat)
    np.add.at(codec.codebook.usage, idx, 1)
    e_flat = codec.codebook.entries.value[idx]
    e = np.moveaxis(e_flat.reshape(*z.shape[0:1], *z.shape[2:], z.shape[1]), -1, 1)

    recon = codec.decoder.forward(e)
    losses = vq_losses(x, z, e, recon, codec.cfg.beta_commit)

    # reconstruction gradient through the decoder, straight through to z
    g_recon = 2.0 * (recon - x) / x.size
    if codec.discriminator is not None:
        # generator hinge term: maximize D(fake)
        fake_logits = codec.discriminator.forward(recon)
        losses["generator"] = codec.cfg.gan_weight * float(-np.mean(fake_logits))
        losses["total"] += losses["generator"]
        g_fake = np.full_like(fake_logits, -codec.cfg.gan_weight / fake_logits.size)
        g_recon = g_recon + codec.discriminator.backward(g_fake)
        codec.discriminator.zero_grad()  # generator term must not update D
    g_z = codec.decoder.backward(g_recon)
    g_z += 2.0 * codec.cfg.beta_commit * (z - e) / z.size
    codec.encoder.backward(g_z)

    # codebook entries are pulled toward the encoder outputs they captured
    g_entries = np.zeros_like(codec.codebook.entries.value)
    np.add.at(g_entries, idx, 2.0 * (e_flat - flat) / z.size)
    codec.codebook.entries.grad += g_entries

    adam_step(codec.encoder, cfg)
    adam_step(codec.decoder, cfg)
    _adam_single(codec, codec.codebook.entries, cfg.learning_rate)

    if codec.discriminator is not None:
        real_logits = codec.discriminator.forward(x)
        fr = codec.discriminator.forward(recon)
        losses["discriminator"] = _hinge_d(real_logits, fr)
        g_fake_d = (fr > -1.0).astype(np.float32) / fr.size
        codec.discriminator.backward(g_fake_d)
        g_real = -(real_logits < 1.0).astype(np.float32) / real_logits.size
        codec.discriminator.forward(x)
        codec.discriminator.backward(g_real)
        adam_step(codec.discriminator, cfg)

    return losses


class _BagNet(Network):
    """Adapter so a lone Param can ride the shared Adam implementation."""

    def __init__(self, param: Param):
        super().__init__(1, False)

        class _Holder:
            def __init__(self, p):
                self.p = p

            def params(self):
                return [self.p]

        self._blocks = [_Holder(param)]


def _adam_single(codec: VQCodec, param: Param, lr: float) -> None:
    bag = getattr(codec, "_cb_bag", None)
    if bag is None:
        bag = _BagNet(param)
        codec._cb_bag = bag
    adam_step(bag, lr)


def train_codec(codec: VQCodec, volumes: list[Volume], cfg: TrainConfig, steps: int | None = None) -> list[dict]:
    """Minibatch training over a volume list; returns per-step losses."""
    if codec.cfg.identity:
        raise ValueError("identity codec has no trainable parameters")
    if not volumes:
        raise ValueError("no training volumes")
    rng = np.random.default_rng(cfg.seed)
    data = np.stack([v.data.astype(np.float32) for v in volumes])[:, None]
    history = []
    total = steps if steps is not None else cfg.epochs * max(1, len(volumes) // cfg.batch_size)
    for _ in range(total):
        pick = rng.choice(len(volumes), size=min(cfg.batch_size, len(volumes)), replace=False)
        history.append(codec_train_step(codec, data[pick], cfg))
    return history


def reconstruct(codec: VQCodec, vol: Volume) -> Volume:
    """decode(quantize(encode(vol))), or the volume itself in identity mode."""
    latent = encode(codec, vol)
    if not codec.cfg.identity:
        latent = quantize(codec.codebook, latent)
    return decode(codec, latent)


def save_codec(path, codec: VQCodec, include_adam: bool = False) -> None:
    if codec.cfg.identity:
        raise ValueError("identity codec has nothing to save")
    cb = codec.codebook
    import struct

    appendix = struct.pack("<II", cb.k, cb.d)
    appendix += np.ascontiguousarray(cb.entries.value, dtype="<f4").tobytes()
    appendix += np.ascontiguousarray(cb.usage, dtype="<i8").tobytes()
    save_network(path, codec, include_adam=include_adam, appendix=appendix)


def load_codec(path, cfg: CodecConfig) -> VQCodec:
    import struct

    codec = VQCodec(cfg)
    appendix = load_network(path, codec)
    if appendix is None:
        raise ValueError("codec checkpoint is missing its codebook appendix")
    k, d = struct.unpack("<II", appendix[:8])
    if (k, d) != (cfg.codebook_size, cfg.latent_dim):
        raise ValueError(f"codebook shape mismatch: file has {(k, d)}")
    off = 8
    n = k * d * 4
    codec.codebook.entries.value[...] = np.frombuffer(appendix[off : off + n], dtype="<f4").reshape(k, d)
    off += n
    codec.codebook.usage[...] = np.frombuffer(appendix[off : off + 8 * k], dtype="<i8")
    return codec
