"""Forward diffusion, DDPM/DDIM reverse sampling, guidance, anomaly maps.

The detection recipe: take a latent, push it to noise level L, denoise it
back (optionally steered by a healthy-class classifier), decode, and read
the voxel-wise absolute difference as the anomaly map.

Array convention: samplers operate on batched arrays (B, C, X, Y, Z) with
a scalar timestep per call; a denoiser is any callable (x, t) -> epsilon
of the same shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffnet.network import Network, TrainConfig, adam_step
from .volgrid import Volume
from .vqcodec import VQCodec, decode, encode

BETA_START = 1e-4
BETA_END = 0.02
DEFAULT_T = 1000


class NoiseSchedule:
    """beta/alpha tables indexed by t in 1..T, with alpha_bar(0) = 1."""

    def __init__(self, betas: np.ndarray):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a nonempty 1D array")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("betas must lie strictly inside (0, 1)")
        self._betas = betas
        self._alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])

    @property
    def timesteps(self) -> int:
        return self._betas.size

    def beta(self, t: int) -> float:
        if not 1 <= t <= self.timesteps:
            raise ValueError(f"t={t} outside 1..{self.timesteps}")
        return float(self._betas[t - 1])

    def alpha(self, t: int) -> float:
        return 1.0 - self.beta(t)

    def alpha_bar(self, t) -> float | np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.timesteps):
            raise ValueError(f"t={t} outside 0..{self.timesteps}")
        out = self._alpha_bars[t]
        return float(out) if out.ndim == 0 else out


def make_schedule(timesteps: int = DEFAULT_T, kind: str = "linear") -> NoiseSchedule:
    """Linear betas from 1e-4 to 0.02, endpoints included."""
    if timesteps < 1:
        raise ValueError("need at least one timestep")
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if timesteps == 1:
        return NoiseSchedule(np.array([BETA_START]))
    return NoiseSchedule(np.linspace(BETA_START, BETA_END, timesteps))


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "ddim"
    noise_level: int = 500
    guidance_scale: float = 0.0
    stride: int = 1
    refine: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("ddpm", "ddim"):
            raise ValueError(f"mode must be 'ddpm' or 'ddim', got {self.mode!r}")
        if self.noise_level < 0:
            raise ValueError("noise_level must be nonnegative")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be nonnegative")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not 0 <= self.refine <= 3:
            raise ValueError("refine must be in 0..3")


def q_sample(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form jump x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.

    t may be a scalar or a per-sample array matching x0's batch axis.
    """
    if eps.shape != x0.shape:
        raise ValueError("eps must be shaped like x0")
    ab = schedule.alpha_bar(t)
    if np.ndim(ab) > 0:
        shape = (x0.shape[0],) + (1,) * (x0.ndim - 1)
        ab = np.asarray(ab).reshape(shape)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def guided_eps(eps: np.ndarray, grad_logp: np.ndarray, s: float, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Classifier-guided correction: eps - s * sqrt(1 - ab_t) * grad_logp."""
    if s < 0:
        raise ValueError("guidance scale must be nonnegative")
    if np.shape(grad_logp) != np.shape(eps):
        raise ValueError("grad_logp must be shaped like eps")
    if s == 0.0:
        return eps
    return eps - s * math.sqrt(1.0 - schedule.alpha_bar(t)) * grad_logp


def predict_x0(x_t: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    ab = schedule.alpha_bar(t)
    return (x_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)


def _effective_eps(denoiser, x, t, schedule, grad_logp, s):
    eps = denoiser(x, t)
    if grad_logp is not None and s > 0:
        eps = guided_eps(eps, grad_logp(x, t), s, t, schedule)
    return eps


def ddpm_step(denoiser, x_t: np.ndarray, t: int, schedule: NoiseSchedule, rng: np.random.Generator,
              grad_logp=None, s: float = 0.0) -> np.ndarray:
    """One ancestral step t -> t-1; the noise term is dropped at t=1."""
    if not 1 <= t <= schedule.timesteps:
        raise ValueError(f"t={t} outside 1..{schedule.timesteps}")
    eps = _effective_eps(denoiser, x_t, t, schedule, grad_logp, s)
    beta = schedule.beta(t)
    ab_t = schedule.alpha_bar(t)
    mu = (x_t - beta / math.sqrt(1.0 - ab_t) * eps) / math.sqrt(schedule.alpha(t))
    if t == 1:
        return mu
    ab_prev = schedule.alpha_bar(t - 1)
    sigma = math.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * beta)
    return mu + sigma * rng.standard_normal(x_t.shape)


def ddim_step(denoiser, x_t: np.ndarray, t: int, t_prev: int, schedule: NoiseSchedule,
              grad_logp=None, s: float = 0.0) -> np.ndarray:
    """Deterministic (eta = 0) step t -> t_prev."""
    if t_prev > t:
        raise ValueError("t_prev must not exceed t")
    eps = _effective_eps(denoiser, x_t, t, schedule, grad_logp, s)
    x0_hat = predict_x0(x_t, t, eps, schedule)
    ab_prev = schedule.alpha_bar(t_prev)
    return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps


def step_sequence(level: int, stride: int) -> list[tuple[int, int]]:
    """(t, t_prev) pairs walking from `level` down to 0."""
    return [(t, max(t - stride, 0)) for t in range(level, 0, -stride)]


def ddim_decode(denoiser, x_level: np.ndarray, level: int, schedule: NoiseSchedule, stride: int = 1,
                grad_logp=None, s: float = 0.0) -> np.ndarray:
    x = x_level
    for t, t_prev in step_sequence(level, stride):
        x = ddim_step(denoiser, x, t, t_prev, schedule, grad_logp, s)
    return x


def ddim_encode(denoiser, x0: np.ndarray, level: int, schedule: NoiseSchedule, stride: int = 1,
                refine: int = 0) -> np.ndarray:
    """Deterministic noising to `level` by inverting the DDIM recurrence.

    Naive inversion evaluates eps at the current state and the target
    timestep; `refine` adds up to 3 fixed-point re-evaluations per step.
    """
    if not 0 <= refine <= 3:
        raise ValueError("refine must be in 0..3")
    if level > schedule.timesteps:
        raise ValueError("level exceeds schedule length")
    x = x0
    for t, t_prev in reversed(step_sequence(level, stride)):
        ab_t = schedule.alpha_bar(t)
        ab_prev = schedule.alpha_bar(t_prev)
        x_next = x
        for _ in range(1 + refine):
            eps = denoiser(x_next, t)
            x0_hat = (x - math.sqrt(1.0 - ab_prev) * eps) / math.sqrt(ab_prev)
            x_next = math.sqrt(ab_t) * x0_hat + math.sqrt(1.0 - ab_t) * eps
        x = x_next
    return x


def ddpm_decode(denoiser, x_level: np.ndarray, level: int, schedule: NoiseSchedule,
                rng: np.random.Generator, grad_logp=None, s: float = 0.0) -> np.ndarray:
    x = x_level
    for t in range(level, 0, -1):
        x = ddpm_step(denoiser, x, t, schedule, rng, grad_logp, s)
    return x


def gaussian_oracle_denoiser(mu, sigma0: float, schedule: NoiseSchedule):
    """Closed-form optimal denoiser for data ~ N(mu, sigma0^2 I)."""
    mu = np.asarray(mu, dtype=np.float64)

    def denoiser(x_t: np.ndarray, t: int) -> np.ndarray:
        ab = schedule.alpha_bar(t)
        if ab >= 1.0:
            raise ValueError("oracle denoiser undefined at t=0")
        sab = math.sqrt(ab)
        coef = sab * sigma0**2 / (ab * sigma0**2 + 1.0 - ab)
        e_x0 = mu + coef * (x_t - sab * mu)
        return (x_t - sab * e_x0) / math.sqrt(1.0 - ab)

    return denoiser


def net_denoiser(net: Network):
    """Adapt a time-conditioned network to the (x, t) -> eps interface."""

    def denoiser(x: np.ndarray, t: int) -> np.ndarray:
        return net.forward(x, np.full(x.shape[0], float(t)))

    return denoiser


def reconstruct_healthy(x: Volume, cfg: SamplerConfig, codec: VQCodec, denoiser,
                        classifier=None, schedule: NoiseSchedule | None = None,
                        latent_scale: float = 1.0) -> Volume:
    """Noise the latent of x to level L, denoise back, decode.

    classifier: optional callable (x_t, t) -> gradient of the healthy
    log-probability, required when cfg.guidance_scale > 0.  latent_scale
    multiplies the latent before diffusion (and divides after) so the
    sampler sees data near unit variance whatever the encoder emits.
    """
    if schedule is None:
        schedule = make_schedule(DEFAULT_T)
    if cfg.noise_level > schedule.timesteps:
        raise ValueError("noise level exceeds schedule length")
    if cfg.guidance_scale > 0 and classifier is None:
        raise ValueError("guidance requested but no classifier gradient supplied")
    if not latent_scale > 0:
        raise ValueError(f"latent_scale must be positive, got {latent_scale}")

    latent = encode(codec, x)
    z = latent.continuous[None].astype(np.float32)
    if latent_scale != 1.0:
        z = z * np.float32(latent_scale)

    if cfg.noise_level > 0:
        if cfg.mode == "ddim":
            z_l = ddim_encode(denoiser, z, cfg.noise_level, schedule, cfg.stride, cfg.refine)
            z0 = ddim_decode(denoiser, z_l, cfg.noise_level, schedule, cfg.stride,
                             classifier, cfg.guidance_scale)
        else:
            rng = np.random.default_rng(cfg.seed)
            eps = rng.standard_normal(z.shape)
            z_l = q_sample(z, cfg.noise_level, eps, schedule)
            z0 = ddpm_decode(denoiser, z_l, cfg.noise_level, schedule, rng,
                             classifier, cfg.guidance_scale)
        z = z0

    if latent_scale != 1.0:
        z = z / np.float32(latent_scale)
    out_latent = type(latent)(
        z[0].astype(np.float32), latent.spacing, latent.origin
    )
    return decode(codec, out_latent)


def anomaly_map(x: Volume, x_hat: Volume) -> Volume:
    """Voxel-wise absolute difference |x - x_hat|."""
    if not x.same_geometry(x_hat):
        raise ValueError("anomaly map requires matching geometry")
    return Volume(np.abs(x.data - x_hat.data), x.spacing, x.origin)


def train_denoiser(net: Network, latents: np.ndarray, schedule: NoiseSchedule,
                   cfg: TrainConfig, steps: int | None = None) -> list[float]:
    """Standard epsilon-prediction training on (N, C, X, Y, Z) latents."""
    if latents.ndim != 5 or latents.shape[0] < 1:
        raise ValueError("latents must be a nonempty (N, C, X, Y, Z) array")
    rng = np.random.default_rng(cfg.seed)
    n = latents.shape[0]
    total = steps if steps is not None else cfg.epochs * max(1, n // cfg.batch_size)
    history = []
    for _ in range(total):
        pick = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        x0 = latents[pick].astype(np.float32)
        t = rng.integers(1, schedule.timesteps, endpoint=True, size=len(pick))
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        x_t = q_sample(x0, t, eps, schedule).astype(np.float32)
        pred = net.forward(x_t, t.astype(np.float64))
        diff = pred - eps
        history.append(float(np.mean(diff * diff)))
        net.backward(2.0 * diff / diff.size)
        adam_step(net, cfg)
    return history
