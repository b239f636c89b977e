"""End-to-end orchestration shared by the CLI and the demo scripts.

Stage trainers consume a dataset manifest and emit checkpoints; detection
loads those checkpoints and turns one case into an anomaly map, a healthy
reconstruction, a candidate mask, and a montage image.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .classifier import (
    ClassifierHead,
    TrainingReport,
    balance_dataset,
    guidance_gradient,
    load_classifier,
    prepare_noised_dataset,
    save_classifier,
    train_classifier,
)
from .config import PipelineConfig
from .diffnet import TrainConfig, UNet3D, load_network, save_network
from .diffusion import (
    NoiseSchedule,
    anomaly_map,
    make_schedule,
    net_denoiser,
    reconstruct_healthy,
    train_denoiser,
)
from .phantom import HEALTHY
from .postprocess import ComponentSet, extract_instances
from .volgrid import (
    BinaryMask,
    Volume,
    compose_full_map,
    extract_patch,
    normalize_intensity,
    resample_isotropic,
)
from .vqcodec import VQCodec, encode, load_codec, save_codec, train_codec

_SCALE_APPENDIX = struct.Struct("<f")


class MissingArtifact(FileNotFoundError):
    """A required checkpoint or input file is absent."""

    def __init__(self, path):
        super().__init__(f"missing required artifact: {path}")
        self.path = Path(path)


@dataclass(frozen=True)
class ModelPaths:
    codec: Path
    denoiser: Path
    classifier: Path


def model_paths(models_dir) -> ModelPaths:
    d = Path(models_dir)
    return ModelPaths(d / "codec.net1", d / "denoiser.net1", d / "classifier.net1")


def latent_channels(cfg: PipelineConfig) -> int:
    return 1 if cfg.codec.identity else cfg.codec.latent_dim


def prepare_volume(image: Volume, cfg: PipelineConfig) -> Volume:
    """Resample to the working spacing and clamp into the model range."""
    vol = resample_isotropic(image, cfg.detect.target_spacing_mm)
    return normalize_intensity(vol, -1.0, 1.0)


def kidney_patches(vol: Volume, centers, cfg: PipelineConfig):
    return [extract_patch(vol, c, cfg.detect.patch_mm) for c in centers]


def collect_patches(entries, cfg: PipelineConfig) -> list[tuple[Volume, str]]:
    """Every kidney patch in the dataset, tagged with its case weak label."""
    out = []
    for e in entries:
        vol = prepare_volume(e.load_image(), cfg)
        for patch, _ in kidney_patches(vol, e.roi_centers_mm, cfg):
            out.append((patch, e.weak_label))
    return out


def patch_latents(codec: VQCodec, patches) -> np.ndarray:
    return np.stack([encode(codec, p).continuous for p in patches])


def healthy_latent_scale(codec: VQCodec, pairs) -> float:
    """1/std over healthy-labeled patch latents, so the diffusion model
    trains and samples near unit variance."""
    healthy = [p for p, lbl in pairs if lbl == HEALTHY]
    if not healthy:
        raise ValueError("no healthy-labeled cases to estimate the latent scale")
    sd = float(np.std(patch_latents(codec, healthy)))
    return 1.0 / sd if sd > 1e-8 else 1.0


def make_denoiser_net(cfg: PipelineConfig) -> UNet3D:
    c = latent_channels(cfg)
    return UNet3D(c, c, base_channels=cfg.denoiser.base_channels, seed=cfg.seed)


def make_classifier(cfg: PipelineConfig) -> ClassifierHead:
    return ClassifierHead(
        latent_channels(cfg),
        base_channels=cfg.classifier.base_channels,
        max_timestep=cfg.denoiser.timesteps,
        seed=cfg.seed,
    )


# ---------------------------------------------------------------------------
# Stage training
# ---------------------------------------------------------------------------

def train_codec_stage(cfg: PipelineConfig, entries, out_path, resume: bool = False) -> list[dict]:
    """Fit the autoencoder on all kidney patches; returns per-step losses."""
    if cfg.codec.identity:
        raise ValueError("identity codec has no trainable parameters")
    if resume:
        codec = load_codec(out_path, cfg.codec)
    else:
        codec = VQCodec(cfg.codec)
    volumes = [p for p, _ in collect_patches(entries, cfg)]
    tc = TrainConfig(cfg.codec_budget.learning_rate, cfg.codec_budget.batch_size, seed=cfg.seed)
    history = []
    if cfg.codec_budget.steps > 0:
        history = train_codec(codec, volumes, tc, steps=cfg.codec_budget.steps)
    save_codec(out_path, codec, include_adam=True)
    return history


def train_denoiser_stage(cfg: PipelineConfig, codec: VQCodec, entries, out_path,
                         resume: bool = False) -> list[float]:
    """Fit the noise predictor on healthy-labeled latents only."""
    pairs = collect_patches(entries, cfg)
    scale = healthy_latent_scale(codec, pairs)
    latents = patch_latents(codec, [p for p, lbl in pairs if lbl == HEALTHY])
    net = make_denoiser_net(cfg)
    if resume:
        load_network(out_path, net)
    schedule = make_schedule(cfg.denoiser.timesteps)
    tc = TrainConfig(cfg.denoiser.learning_rate, cfg.denoiser.batch_size, seed=cfg.seed)
    history = []
    if cfg.denoiser.steps > 0:
        history = train_denoiser(net, latents * np.float32(scale), schedule, tc,
                                 steps=cfg.denoiser.steps)
    save_network(out_path, net, include_adam=True, appendix=_SCALE_APPENDIX.pack(scale))
    return history


def load_denoiser(path, cfg: PipelineConfig) -> tuple[UNet3D, float]:
    """Returns the network and the latent scale stored alongside it."""
    net = make_denoiser_net(cfg)
    appendix = load_network(path, net)
    if appendix is None:
        raise ValueError("denoiser checkpoint is missing its latent-scale appendix")
    return net, float(_SCALE_APPENDIX.unpack(appendix)[0])


def train_classifier_stage(cfg: PipelineConfig, codec: VQCodec, entries, out_path,
                           resume: bool = False) -> TrainingReport:
    """Fit the weak-label classifier on noised latents of every patch."""
    pairs = collect_patches(entries, cfg)
    scale = healthy_latent_scale(codec, pairs)
    latents = patch_latents(codec, [p for p, _ in pairs]) * np.float32(scale)
    labels = [lbl for _, lbl in pairs]
    schedule = make_schedule(cfg.denoiser.timesteps)
    dataset = prepare_noised_dataset(latents, labels, schedule,
                                     cfg.classifier.max_level, seed=cfg.seed)
    if cfg.classifier.balance:
        dataset = balance_dataset(dataset, seed=cfg.seed)
    clf = make_classifier(cfg)
    if resume:
        load_classifier(out_path, clf)
    if cfg.classifier.epochs > 0:
        report = train_classifier(clf, dataset, cfg.classifier.train_config(cfg.seed))
    else:
        report = TrainingReport([], 0, 0.0)
    save_classifier(out_path, clf, include_adam=True)
    return report


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LoadedModels:
    codec: VQCodec
    denoiser: UNet3D
    latent_scale: float
    classifier: ClassifierHead | None


def load_models(cfg: PipelineConfig, models_dir) -> LoadedModels:
    """Load what the sampler config requires; missing file -> MissingArtifact."""
    paths = model_paths(models_dir)
    if cfg.codec.identity:
        codec = VQCodec(cfg.codec)
    else:
        if not paths.codec.exists():
            raise MissingArtifact(paths.codec)
        codec = load_codec(paths.codec, cfg.codec)
    if not paths.denoiser.exists():
        raise MissingArtifact(paths.denoiser)
    net, scale = load_denoiser(paths.denoiser, cfg)
    clf = None
    if cfg.sampler.guidance_scale > 0:
        if not paths.classifier.exists():
            raise MissingArtifact(paths.classifier)
        clf = make_classifier(cfg)
        load_classifier(paths.classifier, clf)
    return LoadedModels(codec, net, scale, clf)


@dataclass(frozen=True)
class CaseDetection:
    input: Volume  # resampled and range-clamped working volume
    anomaly: Volume
    reconstruction: Volume
    prediction: BinaryMask
    components: ComponentSet


def _instances(anomaly: Volume, roi: BinaryMask, pp) -> ComponentSet:
    sel = anomaly.data[roi.data.astype(bool)]
    if sel.size == 0 or float(sel.min()) == float(sel.max()):
        # a flat map has no threshold; report no candidates
        return ComponentSet(np.zeros(anomaly.dims, dtype=np.uint32),
                            anomaly.spacing, anomaly.origin)
    return extract_instances(
        anomaly, roi=roi, bins=pp.bins, morph_radius=pp.morph_radius,
        morph_connectivity=pp.morph_connectivity,
        component_connectivity=pp.component_connectivity,
        min_voxels=pp.min_voxels, min_diameter_mm=pp.min_diameter_mm,
    )


def detect_case(image: Volume, centers, cfg: PipelineConfig, models: LoadedModels,
                schedule: NoiseSchedule | None = None, case_seed: int = 0,
                denoiser=None) -> CaseDetection:
    """Reconstruct each kidney patch as healthy and extract candidates.

    denoiser: optional (x, t) -> eps override; defaults to the loaded net.
    """
    if schedule is None:
        schedule = make_schedule(cfg.denoiser.timesteps)
    vol = prepare_volume(image, cfg)
    sampler = replace(cfg.sampler, seed=case_seed)
    grad = None
    if sampler.guidance_scale > 0:
        if models.classifier is None:
            raise ValueError("guidance requested but no classifier loaded")
        grad = guidance_gradient(models.classifier)
    if denoiser is None:
        denoiser = net_denoiser(models.denoiser)

    maps = []
    recon = vol.data.copy()
    roi = np.zeros(vol.dims, dtype=np.uint8)
    for center in centers:
        patch, placement = extract_patch(vol, center, cfg.detect.patch_mm)
        x_hat = reconstruct_healthy(patch, sampler, models.codec, denoiser, grad,
                                    schedule, latent_scale=models.latent_scale)
        maps.append((anomaly_map(patch, x_hat), placement))
        recon[placement.slices()] = x_hat.data
        roi[placement.slices()] = 1

    anomaly = compose_full_map(maps, vol.dims, vol.spacing, vol.origin)
    roi_mask = BinaryMask(roi, vol.spacing, vol.origin)
    components = _instances(anomaly, roi_mask, cfg.postprocess)
    return CaseDetection(vol, anomaly, Volume(recon, vol.spacing, vol.origin),
                         components.to_mask(), components)


def case_seed_for(seed: int, index: int) -> int:
    """Stable per-case sampler seed, independent of worker scheduling."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Montage
# ---------------------------------------------------------------------------

def write_montage(path, image: Volume, reconstruction: Volume, anomaly: Volume,
                  prediction: BinaryMask) -> None:
    """Mid-slice panels (input | reconstruction | anomaly | prediction) as PGM."""
    z = image.dims[2] // 2

    def panel(data, lo, hi):
        sl = data[:, :, z].astype(np.float64).T
        if hi <= lo:
            return np.zeros(sl.shape, dtype=np.uint8)
        return np.clip(np.rint((sl - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)

    lo, hi = float(image.data.min()), float(image.data.max())
    panels = [
        panel(image.data, lo, hi),
        panel(reconstruction.data, lo, hi),
        panel(anomaly.data, 0.0, float(anomaly.data.max())),
        (prediction.data[:, :, z].T.astype(np.uint8) * 255),
    ]
    sep = np.full((panels[0].shape[0], 2), 255, dtype=np.uint8)
    strip = panels[0]
    for p in panels[1:]:
        strip = np.concatenate([strip, sep, p], axis=1)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (strip.shape[1], strip.shape[0]))
        fh.write(strip.tobytes())
