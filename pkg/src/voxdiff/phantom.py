"""Procedural kidney phantoms with lesions, weak labels, and an ROI oracle.

Cases are pure functions of (config, seed). Geometry, lesion placement,
voxel noise, and label corruption each draw from an independent child
stream, so toggling lesions off reproduces the same anatomy and noise
bit for bit outside the lesion neighbourhood.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .volgrid import BinaryMask, Volume, read_mask, read_volume, write_mask, write_volume

HEALTHY = "healthy"
UNHEALTHY = "unhealthy"

_SMOOTH_SIGMA_VOX = 1.0
_EDGE_MARGIN_VOX = 1.0


@dataclass(frozen=True)
class PhantomConfig:
    """Generator knobs. All lengths are in millimetres."""

    grid_dims: tuple[int, int, int] = (48, 48, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_kidneys: int = 2
    kidney_semiaxes_mm: tuple[float, float] = (7.0, 10.0)
    background_mean: float = -0.6
    kidney_mean: float = 0.3
    lesion_mean: float = 0.9
    noise_sigma: float = 0.05
    lesion_probability: float = 0.5
    lesion_diameter_mm: tuple[float, float] = (5.0, 9.0)
    lesions_per_case: tuple[int, int] = (1, 2)
    label_flip_prob: float = 0.15
    seed: int = 0

    def __post_init__(self) -> None:
        if any(int(d) < 4 for d in self.grid_dims):
            raise ValueError(f"grid too small: {self.grid_dims}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if self.n_kidneys not in (1, 2):
            raise ValueError("n_kidneys must be 1 or 2")
        lo, hi = self.kidney_semiaxes_mm
        if not (0 < lo <= hi):
            raise ValueError(f"bad kidney semi-axis range {self.kidney_semiaxes_mm}")
        for name, v in (
            ("background_mean", self.background_mean),
            ("kidney_mean", self.kidney_mean),
            ("lesion_mean", self.lesion_mean),
        ):
            if not -1.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [-1, 1], got {v}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if not 0.0 <= self.lesion_probability <= 1.0:
            raise ValueError(f"lesion_probability out of range: {self.lesion_probability}")
        dlo, dhi = self.lesion_diameter_mm
        if not (0 < dlo <= dhi):
            raise ValueError(f"bad lesion diameter range {self.lesion_diameter_mm}")
        if dhi > 2.0 * lo:
            raise ValueError(
                f"lesion diameter {dhi} mm exceeds smallest kidney minor axis {2.0 * lo} mm"
            )
        nlo, nhi = self.lesions_per_case
        if not (1 <= nlo <= nhi):
            raise ValueError(f"bad lesions_per_case range {self.lesions_per_case}")
        if not 0.0 <= self.label_flip_prob < 1.0:
            raise ValueError(f"label_flip_prob must lie in [0, 1), got {self.label_flip_prob}")
        # every kidney must fit inside its allotted sub-box with a margin
        margin = _EDGE_MARGIN_VOX * max(self.spacing)
        extent = [d * s for d, s in zip(self.grid_dims, self.spacing)]
        need_x = 2.0 * self.n_kidneys * (hi + margin)
        if extent[0] < need_x or extent[1] < 2.0 * (hi + margin) or extent[2] < 2.0 * (hi + margin):
            raise ValueError(
                f"grid extent {tuple(round(e, 1) for e in extent)} mm cannot hold "
                f"{self.n_kidneys} kidney(s) with semi-axes up to {hi} mm"
            )


@dataclass(frozen=True)
class LabeledCase:
    """One phantom with its noisy case-level label and held-out truth."""

    case_id: str
    image: Volume
    roi_centers_mm: tuple[tuple[float, float, float], ...]
    kidney_semiaxes_mm: tuple[tuple[float, float, float], ...]
    weak_label: str
    true_label: str
    truth_lesions: BinaryMask

    def __post_init__(self) -> None:
        if self.weak_label not in (HEALTHY, UNHEALTHY) or self.true_label not in (HEALTHY, UNHEALTHY):
            raise ValueError("labels must be 'healthy' or 'unhealthy'")
        has_lesions = self.truth_lesions.count() > 0
        if has_lesions != (self.true_label == UNHEALTHY):
            raise ValueError("truth mask must be nonempty exactly for unhealthy cases")


def assign_weak_label(true_label: str, flip_prob: float, rng: np.random.Generator) -> str:
    """Corrupt a case label with independent probability flip_prob."""
    if not 0.0 <= flip_prob < 1.0:
        raise ValueError(f"flip_prob must lie in [0, 1), got {flip_prob}")
    if rng.random() >= flip_prob:
        return true_label
    return HEALTHY if true_label == UNHEALTHY else UNHEALTHY


def roi_center(case: LabeledCase) -> list[tuple[float, float, float]]:
    """Known kidney centroids in mm, ordered left to right along x."""
    return list(case.roi_centers_mm)


def _voxel_coords_mm(cfg: PhantomConfig) -> list[np.ndarray]:
    return [np.arange(n, dtype=np.float64) * s for n, s in zip(cfg.grid_dims, cfg.spacing)]


def _sample_kidneys(cfg: PhantomConfig, rng: np.random.Generator):
    """Centroids and semi-axes, one kidney per x sub-box, left to right."""
    lo, hi = cfg.kidney_semiaxes_mm
    margin = _EDGE_MARGIN_VOX * max(cfg.spacing)
    extent = [d * s for d, s in zip(cfg.grid_dims, cfg.spacing)]
    kidneys = []
    for k in range(cfg.n_kidneys):
        axes = rng.uniform(lo, hi, size=3)
        x0 = extent[0] * k / cfg.n_kidneys
        x1 = extent[0] * (k + 1) / cfg.n_kidneys
        center = np.empty(3)
        center[0] = rng.uniform(x0 + axes[0] + margin, x1 - axes[0] - margin)
        for a in (1, 2):
            center[a] = rng.uniform(axes[a] + margin, extent[a] - axes[a] - margin)
        kidneys.append((center, axes))
    return kidneys


def _ellipsoid_mask(coords, center, axes) -> np.ndarray:
    dx = (coords[0] - center[0]) / axes[0]
    dy = (coords[1] - center[1]) / axes[1]
    dz = (coords[2] - center[2]) / axes[2]
    return dx[:, None, None] ** 2 + dy[None, :, None] ** 2 + dz[None, None, :] ** 2 <= 1.0


def _sphere_mask(coords, center, radius) -> np.ndarray:
    dx = coords[0] - center[0]
    dy = coords[1] - center[1]
    dz = coords[2] - center[2]
    d2 = dx[:, None, None] ** 2 + dy[None, :, None] ** 2 + dz[None, None, :] ** 2
    return d2 <= radius * radius


def _place_lesion(coords, kidney_mask, center_k, axes_k, radius, rng):
    """Find a sphere centre whose voxelization stays inside the kidney."""
    for _ in range(64):
        span = np.maximum(axes_k - radius, 0.0)
        cand = center_k + rng.uniform(-1.0, 1.0, size=3) * span
        sphere = _sphere_mask(coords, cand, radius)
        if sphere.any() and not (sphere & ~kidney_mask).any():
            return sphere
    # centre of the kidney always admits a sphere of radius <= min semi-axis
    return _sphere_mask(coords, center_k, radius)


def generate_case(
    cfg: PhantomConfig, seed: int, force_label: str | None = None, case_id: str | None = None
) -> LabeledCase:
    """Render one phantom. Pure in (cfg, seed, force_label)."""
    streams = np.random.SeedSequence([int(cfg.seed), int(seed)]).spawn(4)
    geom_rng, lesion_rng, noise_rng, label_rng = (np.random.default_rng(s) for s in streams)

    coords = _voxel_coords_mm(cfg)
    kidneys = _sample_kidneys(cfg, geom_rng)

    image = np.full(cfg.grid_dims, cfg.background_mean, dtype=np.float32)
    kidney_mask = np.zeros(cfg.grid_dims, dtype=bool)
    for center, axes in kidneys:
        kidney_mask |= _ellipsoid_mask(coords, center, axes)
    image[kidney_mask] = cfg.kidney_mean

    if force_label is None:
        unhealthy = bool(lesion_rng.random() < cfg.lesion_probability)
    else:
        unhealthy = force_label == UNHEALTHY

    truth = np.zeros(cfg.grid_dims, dtype=bool)
    if unhealthy:
        n_lesions = int(lesion_rng.integers(cfg.lesions_per_case[0], cfg.lesions_per_case[1], endpoint=True))
        contrast = cfg.lesion_mean - cfg.kidney_mean
        for _ in range(n_lesions):
            diameter = lesion_rng.uniform(*cfg.lesion_diameter_mm)
            sign = 1.0 if lesion_rng.random() < 0.5 else -1.0
            k = int(lesion_rng.integers(len(kidneys)))
            sphere = _place_lesion(coords, kidney_mask, kidneys[k][0], kidneys[k][1], diameter / 2.0, lesion_rng)
            image[sphere] += np.float32(sign * contrast)
            truth |= sphere

    image = gaussian_filter(image, sigma=_SMOOTH_SIGMA_VOX, mode="nearest")
    if cfg.noise_sigma > 0:
        image = image + noise_rng.normal(0.0, cfg.noise_sigma, cfg.grid_dims).astype(np.float32)

    true_label = UNHEALTHY if unhealthy else HEALTHY
    weak_label = assign_weak_label(true_label, cfg.label_flip_prob, label_rng)
    return LabeledCase(
        case_id=case_id if case_id is not None else f"case_{seed:05d}",
        image=Volume(image, cfg.spacing),
        roi_centers_mm=tuple(tuple(float(v) for v in c) for c, _ in kidneys),
        kidney_semiaxes_mm=tuple(tuple(float(v) for v in a) for _, a in kidneys),
        weak_label=weak_label,
        true_label=true_label,
        truth_lesions=BinaryMask(truth.astype(np.uint8), cfg.spacing),
    )


def generate_dataset(cfg: PhantomConfig, n_cases: int, balanced: bool = False) -> list[LabeledCase]:
    """Generate n_cases phantoms with per-case seeds cfg.seed-derived.

    With balanced=True the true labels alternate healthy/unhealthy so the
    split is 1:1 (up to one extra healthy case when n_cases is odd).
    """
    if n_cases < 1:
        raise ValueError("n_cases must be positive")
    cases = []
    for i in range(n_cases):
        force = None
        if balanced:
            force = HEALTHY if i % 2 == 0 else UNHEALTHY
        cases.append(generate_case(cfg, seed=i, force_label=force, case_id=f"case_{i:05d}"))
    return cases


_MANIFEST_FIELDS = ["case_id", "weak_label", "true_label", "roi_centers_mm", "image_path", "truth_path"]


def _format_centers(centers) -> str:
    return ";".join(" ".join(f"{v:.6g}" for v in c) for c in centers)


def _parse_centers(text: str) -> tuple[tuple[float, float, float], ...]:
    return tuple(tuple(float(v) for v in part.split()) for part in text.split(";") if part)


def save_dataset(cases: list[LabeledCase], out_dir: str | Path) -> Path:
    """Write VOL1 volumes plus a manifest CSV; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_MANIFEST_FIELDS)
        writer.writeheader()
        for case in cases:
            image_path = out / f"{case.case_id}_image.vol1"
            truth_path = out / f"{case.case_id}_truth.vol1"
            write_volume(image_path, case.image)
            write_mask(truth_path, case.truth_lesions)
            writer.writerow(
                {
                    "case_id": case.case_id,
                    "weak_label": case.weak_label,
                    "true_label": case.true_label,
                    "roi_centers_mm": _format_centers(case.roi_centers_mm),
                    "image_path": image_path.name,
                    "truth_path": truth_path.name,
                }
            )
    return manifest


@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    weak_label: str
    true_label: str
    roi_centers_mm: tuple[tuple[float, float, float], ...]
    image_path: Path
    truth_path: Path

    def load_image(self) -> Volume:
        return read_volume(self.image_path)

    def load_truth(self) -> BinaryMask:
        return read_mask(self.truth_path)


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != _MANIFEST_FIELDS:
            raise ValueError(f"unexpected manifest columns: {reader.fieldnames}")
        for row in reader:
            entries.append(
                ManifestEntry(
                    case_id=row["case_id"],
                    weak_label=row["weak_label"],
                    true_label=row["true_label"],
                    roi_centers_mm=_parse_centers(row["roi_centers_mm"]),
                    image_path=path.parent / row["image_path"],
                    truth_path=path.parent / row["truth_path"],
                )
            )
    return entries
