# The diffnet subpackage is a small reverse-mode autodiff stack built on
# numpy: Conv3d / GroupNorm / SiLU layers, a 3D U-Net denoiser, a patch
# encoder/decoder pair, and a time-conditioned classifier. Every gradient
# it produces can be checked against central finite differences.

import numpy as np

from voxdiff.diffnet import (
    Classifier3D,
    UNet3D,
    finite_difference_check,
    sinusoidal_time_embedding,
)

# Timesteps enter the networks through sinusoidal features, so nearby
# timesteps get nearby embeddings.
emb = sinusoidal_time_embedding(np.array([0.0, 10.0, 500.0, 510.0, 1000.0]))
print("time embedding shape:", emb.shape)


def cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


print(f"cosine(t=500, t=510) = {cos(emb[2], emb[3]):.4f}")
print(f"cosine(t=500, t=1000) = {cos(emb[2], emb[4]):.4f}")

# A denoiser U-Net maps (batch, channels, dx, dy, dz) plus a timestep to a
# noise estimate of the same shape.
net = UNet3D(2, 2, base_channels=4, seed=0, dtype=np.float64)
x = np.random.default_rng(0).normal(size=(1, 2, 8, 8, 8))
t = np.array([137.0])
eps_hat = net.forward(x, t)
print("\nU-Net output shape:", eps_hat.shape)

# Freshly initialized output heads are zeroed (the net starts as the
# identity-to-zero map), which would make a gradient check vacuous.
for p in net.parameters():
    if p.name.startswith("head"):
        p.value[...] = np.random.default_rng(1).normal(0, 0.3, p.value.shape)

worst = finite_difference_check(net, x, t, eps=1e-4, max_entries=6)
print(f"U-Net worst gradient error vs finite differences: {worst:.2e}")

clf = Classifier3D(2, base_channels=4, seed=7, dtype=np.float64)
for p in clf.parameters():
    if p.name.startswith("head"):
        p.value[...] = np.random.default_rng(2).normal(0, 0.3, p.value.shape)
worst = finite_difference_check(clf, x, t, eps=1e-4, max_entries=6)
print(f"classifier worst gradient error vs finite differences: {worst:.2e}")

# The classifier also exposes the gradient of its logit with respect to
# the input volume; that signal later steers the diffusion sampler.
clf.zero_grad()
clf.forward(x, t)
gin = clf.backward(np.ones((1, 1)))
print("input-gradient shape:", gin.shape, " max |g|:", f"{np.abs(gin).max():.3f}")
