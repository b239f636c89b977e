# Synthetic kidney phantoms with weak (case-level) labels.
#
# Each case is a noisy volume holding one or two ellipsoidal kidneys; an
# unhealthy case additionally carries a bright spherical lesion inside a
# kidney. The weak label can be flipped on purpose to mimic unreliable
# report mining.

import tempfile
from pathlib import Path

import numpy as np

from voxdiff.phantom import PhantomConfig, generate_dataset, load_manifest, save_dataset

cfg = PhantomConfig(
    grid_dims=(48, 48, 64),
    n_kidneys=2,
    kidney_semiaxes_mm=(6.0, 9.0),
    lesion_diameter_mm=(4.0, 10.0),
    noise_sigma=0.05,
    label_flip_prob=0.15,
    seed=42,
)

cases = generate_dataset(cfg, 12)

print("case        true       weak       lesion voxels")
for case in cases:
    n_lesion = case.truth_lesions.count()
    print(f"{case.case_id}  {case.true_label:<9}  {case.weak_label:<9}  {n_lesion}")

flips = sum(c.true_label != c.weak_label for c in cases)
print(f"\n{flips} of {len(cases)} weak labels disagree with the truth")

# Intensity statistics. Kidneys sit above background, lesions above kidneys.
img = cases[0].image.data
print(f"\nvolume dims {cases[0].image.dims}, spacing {cases[0].image.spacing} mm")
print(f"intensity range [{img.min():.3f}, {img.max():.3f}], mean {img.mean():.3f}")

# ROI centers drive patch extraction later in the pipeline: one per kidney.
print("kidney centers (mm):", [tuple(round(v, 1) for v in c) for c in cases[0].roi_centers_mm])

# Datasets round-trip through a flat directory of .vol1 files plus a manifest.
with tempfile.TemporaryDirectory() as tmp:
    manifest = save_dataset(cases, tmp)
    entries = load_manifest(manifest)
    files = sorted(p.name for p in Path(tmp).iterdir())
    print(f"\nwrote {len(files)} files, {len(entries)} manifest rows")
    print("first few:", files[:4])

# balanced=True alternates forced labels so tiny datasets still contain
# both classes; handy for smoke tests.
balanced = generate_dataset(PhantomConfig(seed=7), 4, balanced=True)
print("\nbalanced draw:", [c.true_label for c in balanced])

print("same seed reproduces bytes:",
      np.array_equal(generate_dataset(cfg, 1)[0].image.data, cases[0].image.data))
