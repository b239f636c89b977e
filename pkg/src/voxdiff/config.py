"""Sectioned key=value run configuration.

One flat INI file drives every subcommand.  Unknown sections or keys are
rejected outright so a typo in a sweep script fails loudly instead of
silently using a default.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields

from .diffnet import TrainConfig
from .diffusion import DEFAULT_T, SamplerConfig
from .phantom import PhantomConfig
from .vqcodec import CodecConfig


@dataclass(frozen=True)
class StageBudget:
    """Optimizer settings plus an explicit step budget for one stage."""

    base_channels: int = 8
    steps: int = 300
    learning_rate: float = 1e-3
    batch_size: int = 4

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


@dataclass(frozen=True)
class DenoiserSettings(StageBudget):
    timesteps: int = DEFAULT_T

    def __post_init__(self):
        super().__post_init__()
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")


@dataclass(frozen=True)
class ClassifierSettings:
    base_channels: int = 8
    max_level: int = 500
    epochs: int = 10
    patience: int = 3
    learning_rate: float = 1e-3
    batch_size: int = 8
    balance: bool = True

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.batch_size, self.epochs,
                           self.patience, seed)


@dataclass(frozen=True)
class DetectSettings:
    patch_mm: tuple[float, float, float] = (32.0, 32.0, 32.0)
    target_spacing_mm: float = 1.0

    def __post_init__(self):
        if any(p <= 0 for p in self.patch_mm) or self.target_spacing_mm <= 0:
            raise ValueError("patch size and spacing must be positive")


@dataclass(frozen=True)
class PostprocessSettings:
    bins: int = 256
    morph_radius: int = 1
    morph_connectivity: int = 6
    component_connectivity: int = 26
    min_voxels: int = 20
    min_diameter_mm: float = 3.0


@dataclass(frozen=True)
class EvalSettings:
    iou_threshold: float = 0.2
    size_bin_edges_cm: tuple[float, ...] = (2.0, 4.0, 7.0)

    def __post_init__(self):
        edges = tuple(float(e) for e in self.size_bin_edges_cm)
        if list(edges) != sorted(edges) or any(e <= 0 for e in edges):
            raise ValueError("size bin edges must be positive and increasing")
        object.__setattr__(self, "size_bin_edges_cm", edges)


@dataclass(frozen=True)
class PathSettings:
    data_dir: str = "data"
    models_dir: str = "models"
    out_dir: str = "out"


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    n_cases: int = 20
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    codec_budget: StageBudget = field(default_factory=StageBudget)
    denoiser: DenoiserSettings = field(default_factory=DenoiserSettings)
    classifier: ClassifierSettings = field(default_factory=ClassifierSettings)
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(mode="ddim", stride=20))
    detect: DetectSettings = field(default_factory=DetectSettings)
    postprocess: PostprocessSettings = field(default_factory=PostprocessSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    paths: PathSettings = field(default_factory=PathSettings)

    def __post_init__(self):
        if self.sampler.noise_level > self.denoiser.timesteps:
            raise ValueError("sampler noise level exceeds the schedule length")
        if self.classifier.max_level > self.denoiser.timesteps:
            raise ValueError("classifier max_level exceeds the schedule length")


_DEFAULT_PHANTOM = PhantomConfig(grid_dims=(48, 48, 64), kidney_semiaxes_mm=(8.0, 10.0),
                                 lesion_diameter_mm=(8.0, 16.0))


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_tuple(s: str, n: int | None, cast):
    parts = tuple(cast(p) for p in s.split())
    if n is not None and len(parts) != n:
        raise ValueError(f"expected {n} values, got {len(parts)}")
    return parts


# section -> key -> parser
_SCHEMA = {
    "run": {
        "seed": int,
        "n_cases": int,
    },
    "phantom": {
        "grid": lambda s: _parse_tuple(s, 3, int),
        "spacing": lambda s: _parse_tuple(s, 3, float),
        "n_kidneys": int,
        "kidney_semiaxes_mm": lambda s: _parse_tuple(s, 2, float),
        "background_mean": float,
        "kidney_mean": float,
        "lesion_mean": float,
        "noise_sigma": float,
        "lesion_probability": float,
        "lesion_diameter_mm": lambda s: _parse_tuple(s, 2, float),
        "lesions_per_case": lambda s: _parse_tuple(s, 2, int),
        "label_flip_prob": float,
    },
    "codec": {
        "identity": _parse_bool,
        "latent_dim": int,
        "codebook_size": int,
        "base_channels": int,
        "beta_commit": float,
        "use_discriminator": _parse_bool,
        "gan_weight": float,
        "steps": int,
        "learning_rate": float,
        "batch_size": int,
    },
    "denoiser": {
        "base_channels": int,
        "timesteps": int,
        "steps": int,
        "learning_rate": float,
        "batch_size": int,
    },
    "classifier": {
        "base_channels": int,
        "max_level": int,
        "epochs": int,
        "patience": int,
        "learning_rate": float,
        "batch_size": int,
        "balance": _parse_bool,
    },
    "sampler": {
        "mode": str,
        "noise_level": int,
        "guidance_scale": float,
        "stride": int,
        "refine": int,
        "patch_mm": lambda s: _parse_tuple(s, 3, float),
        "target_spacing_mm": float,
    },
    "postprocess": {
        "bins": int,
        "morph_radius": int,
        "morph_connectivity": int,
        "component_connectivity": int,
        "min_voxels": int,
        "min_diameter_mm": float,
    },
    "eval": {
        "iou_threshold": float,
        "size_bins_cm": lambda s: _parse_tuple(s, None, float),
    },
    "paths": {
        "data_dir": str,
        "models_dir": str,
        "out_dir": str,
    },
}


def load_config(path=None, overrides: dict[str, str] | None = None) -> PipelineConfig:
    """Read an INI file (optional) and dotted section.key overrides."""
    parser = configparser.ConfigParser()
    if path is not None:
        with open(path) as fh:
            parser.read_file(fh)
    raw: dict[str, dict[str, object]] = {s: {} for s in _SCHEMA}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ValueError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ValueError(f"unknown config key {section}.{key}")
            raw[section][key] = _SCHEMA[section][key](value)
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ValueError(f"unknown config key {dotted}")
        raw[section][key] = _SCHEMA[section][key](value)
    return _build(raw)


def _build(raw) -> PipelineConfig:
    run = raw["run"]
    seed = run.get("seed", 0)

    ph = dict(raw["phantom"])
    if "grid" in ph:
        ph["grid_dims"] = ph.pop("grid")
    phantom = PhantomConfig(**{**_phantom_defaults(), **ph, "seed": seed})

    co = dict(raw["codec"])
    budget = StageBudget(
        base_channels=co.pop("base_channels", 8),
        steps=co.pop("steps", 300),
        learning_rate=co.pop("learning_rate", 1e-3),
        batch_size=co.pop("batch_size", 4),
    )
    codec = CodecConfig(base_channels=budget.base_channels, seed=seed, **co)

    de = dict(raw["denoiser"])
    denoiser = DenoiserSettings(**de)

    cl = dict(raw["classifier"])
    classifier = ClassifierSettings(**cl)

    sa = dict(raw["sampler"])
    detect = DetectSettings(
        patch_mm=sa.pop("patch_mm", (32.0, 32.0, 32.0)),
        target_spacing_mm=sa.pop("target_spacing_mm", 1.0),
    )
    sampler = SamplerConfig(seed=seed, **{"mode": "ddim", "stride": 20, **sa})

    ev = dict(raw["eval"])
    if "size_bins_cm" in ev:
        ev["size_bin_edges_cm"] = ev.pop("size_bins_cm")
    return PipelineConfig(
        seed=seed,
        n_cases=run.get("n_cases", 20),
        phantom=phantom,
        codec=codec,
        codec_budget=budget,
        denoiser=denoiser,
        classifier=classifier,
        sampler=sampler,
        detect=detect,
        postprocess=PostprocessSettings(**raw["postprocess"]),
        eval=EvalSettings(**ev),
        paths=PathSettings(**raw["paths"]),
    )


def _phantom_defaults() -> dict:
    return {f.name: getattr(_DEFAULT_PHANTOM, f.name) for f in fields(PhantomConfig)}


def save_config(path, cfg: PipelineConfig) -> None:
    """Write the full configuration as INI (every key, current values)."""
    parser = configparser.ConfigParser()
    parser["run"] = {"seed": str(cfg.seed), "n_cases": str(cfg.n_cases)}
    p = cfg.phantom
    parser["phantom"] = {
        "grid": " ".join(str(v) for v in p.grid_dims),
        "spacing": " ".join(f"{v:g}" for v in p.spacing),
        "n_kidneys": str(p.n_kidneys),
        "kidney_semiaxes_mm": " ".join(f"{v:g}" for v in p.kidney_semiaxes_mm),
        "background_mean": f"{p.background_mean:g}",
        "kidney_mean": f"{p.kidney_mean:g}",
        "lesion_mean": f"{p.lesion_mean:g}",
        "noise_sigma": f"{p.noise_sigma:g}",
        "lesion_probability": f"{p.lesion_probability:g}",
        "lesion_diameter_mm": " ".join(f"{v:g}" for v in p.lesion_diameter_mm),
        "lesions_per_case": " ".join(str(v) for v in p.lesions_per_case),
        "label_flip_prob": f"{p.label_flip_prob:g}",
    }
    c, b = cfg.codec, cfg.codec_budget
    parser["codec"] = {
        "identity": str(c.identity).lower(),
        "latent_dim": str(c.latent_dim),
        "codebook_size": str(c.codebook_size),
        "base_channels": str(b.base_channels),
        "beta_commit": f"{c.beta_commit:g}",
        "use_discriminator": str(c.use_discriminator).lower(),
        "gan_weight": f"{c.gan_weight:g}",
        "steps": str(b.steps),
        "learning_rate": f"{b.learning_rate:g}",
        "batch_size": str(b.batch_size),
    }
    d = cfg.denoiser
    parser["denoiser"] = {
        "base_channels": str(d.base_channels),
        "timesteps": str(d.timesteps),
        "steps": str(d.steps),
        "learning_rate": f"{d.learning_rate:g}",
        "batch_size": str(d.batch_size),
    }
    cl = cfg.classifier
    parser["classifier"] = {
        "base_channels": str(cl.base_channels),
        "max_level": str(cl.max_level),
        "epochs": str(cl.epochs),
        "patience": str(cl.patience),
        "learning_rate": f"{cl.learning_rate:g}",
        "batch_size": str(cl.batch_size),
        "balance": str(cl.balance).lower(),
    }
    s, dt = cfg.sampler, cfg.detect
    parser["sampler"] = {
        "mode": s.mode,
        "noise_level": str(s.noise_level),
        "guidance_scale": f"{s.guidance_scale:g}",
        "stride": str(s.stride),
        "refine": str(s.refine),
        "patch_mm": " ".join(f"{v:g}" for v in dt.patch_mm),
        "target_spacing_mm": f"{dt.target_spacing_mm:g}",
    }
    pp = cfg.postprocess
    parser["postprocess"] = {
        "bins": str(pp.bins),
        "morph_radius": str(pp.morph_radius),
        "morph_connectivity": str(pp.morph_connectivity),
        "component_connectivity": str(pp.component_connectivity),
        "min_voxels": str(pp.min_voxels),
        "min_diameter_mm": f"{pp.min_diameter_mm:g}",
    }
    parser["eval"] = {
        "iou_threshold": f"{cfg.eval.iou_threshold:g}",
        "size_bins_cm": " ".join(f"{v:g}" for v in cfg.eval.size_bin_edges_cm),
    }
    parser["paths"] = {
        "data_dir": cfg.paths.data_dir,
        "models_dir": cfg.paths.models_dir,
        "out_dir": cfg.paths.out_dir,
    }
    with open(path, "w") as fh:
        parser.write(fh)
