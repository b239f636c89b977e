# Weak labels never touch the generative stages; they train a separate
# classifier on noised latents. At sampling time its input gradient nudges
# each denoising step toward the healthy side, scaled by a single factor.

import numpy as np

from voxdiff.classifier import (
    ClassifierHead,
    auc,
    classify,
    guidance_gradient,
    label_index,
    prepare_noised_dataset,
    train_classifier,
)
from voxdiff.diffnet import TrainConfig
from voxdiff.diffusion import ddim_decode, gaussian_oracle_denoiser, guided_eps, make_schedule

sched = make_schedule(200)
rng = np.random.default_rng(0)

# Toy latents on an 8^3 grid: every case is smooth noise, unhealthy cases
# additionally carry a bright 3^3 block in one corner. The signal has to be
# spatial; the trunk's normalization layers ignore a global mean shift.
n = 80
labels = ["healthy" if i % 2 == 0 else "unhealthy" for i in range(n)]
latents = []
for lbl in labels:
    z = rng.normal(0.0, 0.1, size=(1, 8, 8, 8))
    if lbl == "unhealthy":
        z[0, 1:4, 1:4, 1:4] += 1.0
    latents.append(z)
latents = np.stack(latents).astype(np.float32)

dataset = []
for seed in (1, 2, 3):
    dataset += prepare_noised_dataset(latents, labels, sched, max_level=80, seed=seed)
print(f"{len(dataset)} noised training examples, noise levels "
      f"{min(t for _, _, t in dataset)}..{max(t for _, _, t in dataset)}")

clf = ClassifierHead(1, base_channels=4, max_timestep=200, seed=3)
report = train_classifier(clf, dataset, TrainConfig(learning_rate=2e-3, batch_size=8, epochs=12))
print(f"best validation AUC: {report.best_auc:.3f} at epoch {report.best_epoch}")

scores = [classify(clf, z, t) for z, lbl, t in dataset[:40]]
truths = [int(lbl == "healthy") for _, lbl, _ in dataset[:40]]
print(f"AUC on a training slice: {auc(scores, truths):.3f}")
print("label_index('healthy') =", label_index("healthy"))

# The guidance gradient plugs into both samplers. Scale zero must leave the
# trajectory untouched, bit for bit.
grad = guidance_gradient(clf)
oracle = gaussian_oracle_denoiser(np.zeros((1, 1, 8, 8, 8)), 0.3, sched)
x_start = rng.standard_normal((1, 1, 8, 8, 8))
x_start[0, 0, 1:4, 1:4, 1:4] += 1.0  # start from an unhealthy-looking state

plain = ddim_decode(oracle, x_start, 100, sched, stride=10)
s0 = ddim_decode(oracle, x_start, 100, sched, stride=10, grad_logp=grad, s=0.0)
print("\ns=0 is bitwise identical to unguided:", np.array_equal(plain, s0))

guided = ddim_decode(oracle, x_start, 100, sched, stride=10, grad_logp=grad, s=30.0)
print(f"P(healthy) of the unguided sample: {classify(clf, plain[0], 0):.3f}")
print(f"P(healthy) of the s=30 sample:     {classify(clf, guided[0], 0):.3f}")
block = (slice(0, 1), slice(0, 1), slice(1, 4), slice(1, 4), slice(1, 4))
print(f"corner-block mean, unguided vs guided: "
      f"{plain[block].mean():+.3f} vs {guided[block].mean():+.3f}")

# The per-step correction itself: eps' = eps - s * sqrt(1 - alpha_bar_t) * g.
eps = np.zeros(3)
g = np.array([0.5, 0.0, -0.5])
print("guided_eps example:", guided_eps(eps, g, s=1.0, t=100, schedule=sched))
