"""Desk-scale 3D latent-diffusion anomaly detection toolkit."""

from voxdiff.config import PipelineConfig, load_config, save_config
from voxdiff.diffusion import (
    NoiseSchedule,
    SamplerConfig,
    anomaly_map,
    ddim_decode,
    ddim_encode,
    ddpm_decode,
    gaussian_oracle_denoiser,
    guided_eps,
    make_schedule,
    q_sample,
    reconstruct_healthy,
)
from voxdiff.evalkit import detection_metrics, dice, evaluate_case, iou, match_lesions
from voxdiff.phantom import PhantomConfig, generate_case, generate_dataset, save_dataset
from voxdiff.pipeline import detect_case, load_models
from voxdiff.postprocess import extract_instances, otsu_threshold
from voxdiff.volgrid import BinaryMask, Volume, read_volume, write_volume

__version__ = "0.1.0"

__all__ = [
    "BinaryMask",
    "NoiseSchedule",
    "PhantomConfig",
    "PipelineConfig",
    "SamplerConfig",
    "Volume",
    "anomaly_map",
    "ddim_decode",
    "ddim_encode",
    "ddpm_decode",
    "detect_case",
    "detection_metrics",
    "dice",
    "evaluate_case",
    "extract_instances",
    "gaussian_oracle_denoiser",
    "generate_case",
    "generate_dataset",
    "guided_eps",
    "iou",
    "load_config",
    "load_models",
    "make_schedule",
    "match_lesions",
    "otsu_threshold",
    "q_sample",
    "read_volume",
    "reconstruct_healthy",
    "save_config",
    "save_dataset",
    "write_volume",
]
