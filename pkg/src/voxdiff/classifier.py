"""Healthy/unhealthy classifier over noised latents.

Wraps the shared encoder trunk with a 2-logit softmax head, provides
probabilities and exact input-space gradients of the healthy
log-probability (used to steer the sampler), and trains with
cross-entropy plus AUC-based early stopping.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .diffnet import Classifier3D, TrainConfig, adam_step
from .diffnet.checkpoint import load_network, save_network
from .diffusion import DEFAULT_T, NoiseSchedule, q_sample
from .phantom import HEALTHY

UNHEALTHY_INDEX = 0
HEALTHY_INDEX = 1

_APPENDIX = struct.Struct("<I")


class ClassifierHead:
    """Encoder trunk + global pool + linear 2-logit head, time conditioned.

    max_timestep bounds the noise levels the head accepts; latents at any
    t in [0, max_timestep] are valid inputs.
    """

    __slots__ = ("net", "max_timestep")

    def __init__(self, in_channels, base_channels=16, max_timestep=DEFAULT_T,
                 seed=0, dtype=np.float32):
        if max_timestep < 1:
            raise ValueError("max_timestep must be >= 1")
        self.net = Classifier3D(in_channels, base_channels, time_conditioned=True,
                                seed=seed, dtype=dtype, out_features=2)
        self.max_timestep = int(max_timestep)


def _latent_values(z) -> np.ndarray:
    arr = z.values if hasattr(z, "values") else np.asarray(z)
    if arr.ndim != 4:
        raise ValueError(f"latent must be (channels, x, y, z), got shape {arr.shape}")
    return arr


def _check_t(clf: ClassifierHead, t) -> float:
    t = float(t)
    if not 0 <= t <= clf.max_timestep:
        raise ValueError(f"t={t} outside [0, {clf.max_timestep}]")
    return t


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def classify(clf: ClassifierHead, z_t, t) -> float:
    """Probability that the latent z_t at noise level t is healthy."""
    t = _check_t(clf, t)
    x = _latent_values(z_t)[None]
    logits = clf.net.forward(x, np.array([t]))
    return float(_softmax(logits)[0, HEALTHY_INDEX])


def _classify_batch(clf: ClassifierHead, batch: np.ndarray, t: np.ndarray) -> np.ndarray:
    return _softmax(clf.net.forward(batch, t))[:, HEALTHY_INDEX]


def input_gradient(clf: ClassifierHead, z_t, t) -> np.ndarray:
    """Gradient of log p(healthy | z_t, t) with respect to the latent."""
    t = _check_t(clf, t)
    x = _latent_values(z_t)[None]
    logits = clf.net.forward(x, np.array([t]))
    gl = -_softmax(logits)
    gl[0, HEALTHY_INDEX] += 1.0
    g = clf.net.backward(gl)
    clf.net.zero_grad()
    return g[0]


def guidance_gradient(clf: ClassifierHead):
    """Adapter for the sampler: (x_t, t) -> grad of healthy log-probability.

    Accepts batched (B, C, x, y, z) states and returns a gradient of the
    same shape.
    """

    def grad_logp(x_t: np.ndarray, t) -> np.ndarray:
        t = _check_t(clf, t)
        logits = clf.net.forward(x_t, np.full(x_t.shape[0], t))
        gl = -_softmax(logits)
        gl[:, HEALTHY_INDEX] += 1.0
        g = clf.net.backward(gl)
        clf.net.zero_grad()
        return g

    return grad_logp


def auc(scores, labels) -> float:
    """Area under the ROC curve, Mann-Whitney form; ties count one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-d sequences")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def label_index(label: str) -> int:
    return HEALTHY_INDEX if label == HEALTHY else UNHEALTHY_INDEX


def prepare_noised_dataset(latents: np.ndarray, labels, schedule: NoiseSchedule,
                           max_level: int, seed: int = 0) -> list[tuple[np.ndarray, str, int]]:
    """Attach a uniformly drawn noise level t in [0, max_level] to each latent.

    latents: (N, C, x, y, z); labels: N weak-label strings.  Returns
    (z_t, label, t) triples ready for train_classifier.
    """
    latents = np.asarray(latents)
    if latents.ndim != 5 or latents.shape[0] != len(labels):
        raise ValueError("latents must be (N, C, x, y, z) matching len(labels)")
    if not 0 <= max_level <= schedule.timesteps:
        raise ValueError("max_level outside schedule range")
    rng = np.random.default_rng(seed)
    out = []
    for z0, label in zip(latents, labels):
        t = int(rng.integers(0, max_level + 1))
        z_t = q_sample(z0, t, rng.standard_normal(z0.shape), schedule) if t > 0 else z0
        out.append((z_t.astype(latents.dtype), label, t))
    return out


def balance_dataset(dataset, seed: int = 0):
    """Downsample the majority class so both labels appear equally often."""
    rng = np.random.default_rng(seed)
    by_class: dict[str, list] = {}
    for item in dataset:
        by_class.setdefault(item[1], []).append(item)
    if len(by_class) != 2:
        raise ValueError("balancing needs exactly two classes")
    n = min(len(v) for v in by_class.values())
    kept = []
    for items in by_class.values():
        idx = rng.permutation(len(items))[:n]
        kept.extend(items[i] for i in sorted(idx))
    order = rng.permutation(len(kept))
    return [kept[i] for i in order]


@dataclass(frozen=True)
class TrainingReport:
    epochs: list[tuple[int, float, float]]  # (epoch, mean loss, val AUC)
    best_epoch: int
    best_auc: float


def save_report(path, report: TrainingReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "val_auc"])
        for epoch, loss, val_auc in report.epochs:
            w.writerow([epoch, f"{loss:.6f}", f"{val_auc:.6f}"])


def _split_stratified(dataset, val_fraction: float, rng) -> tuple[list, list]:
    train, val = [], []
    by_class: dict[str, list] = {}
    for item in dataset:
        by_class.setdefault(item[1], []).append(item)
    for items in by_class.values():
        idx = rng.permutation(len(items))
        n_val = max(1, int(round(val_fraction * len(items))))
        if n_val >= len(items):
            raise ValueError("class too small to hold out validation examples")
        val.extend(items[i] for i in idx[:n_val])
        train.extend(items[i] for i in idx[n_val:])
    return train, val


def _stack(items, dtype):
    x = np.stack([np.asarray(z, dtype=dtype) for z, _, _ in items])
    y = np.array([label_index(lbl) for _, lbl, _ in items], dtype=np.int64)
    t = np.array([float(tt) for _, _, tt in items])
    return x, y, t


def train_classifier(clf: ClassifierHead, dataset, cfg: TrainConfig,
                     val_dataset=None, val_fraction: float = 0.2) -> TrainingReport:
    """Cross-entropy training with early stopping on validation AUC.

    dataset: iterable of (z_t, weak_label, t) triples.  When val_dataset is
    None a stratified val_fraction split is held out.  The parameters of
    the best-AUC epoch are restored before returning.
    """
    dataset = list(dataset)
    labels = {item[1] for item in dataset}
    if len(labels) < 2:
        raise ValueError("training data contains a single class")
    rng = np.random.default_rng(cfg.seed)
    if val_dataset is None:
        train_set, val_set = _split_stratified(dataset, val_fraction, rng)
    else:
        train_set, val_set = dataset, list(val_dataset)
        if len({item[1] for item in val_set}) < 2:
            raise ValueError("validation data contains a single class")

    dtype = clf.net.dtype
    x_val, y_val, t_val = _stack(val_set, dtype)
    params = clf.net.parameters()

    history: list[tuple[int, float, float]] = []
    best_auc, best_epoch, best_values = -np.inf, 0, None
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
            x, y, t = _stack(batch, dtype)
            logits = clf.net.forward(x, t)
            p = _softmax(logits)
            eps = np.finfo(np.float64).tiny
            losses.append(float(-np.log(p[np.arange(len(y)), y] + eps).mean()))
            gl = p.copy()
            gl[np.arange(len(y)), y] -= 1.0
            clf.net.backward((gl / len(y)).astype(dtype))
            adam_step(clf.net, cfg)

        val_scores = _classify_batch(clf, x_val, t_val)
        val_auc = auc(val_scores, (y_val == HEALTHY_INDEX).astype(int))
        history.append((epoch, float(np.mean(losses)), val_auc))

        # ties keep the later (more trained) checkpoint but still count
        # toward patience, so a flat AUC cannot run forever
        if val_auc >= best_auc:
            best_epoch = epoch
            best_values = [p.value.copy() for p in params]
        if val_auc > best_auc:
            best_auc = val_auc
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    if best_values is not None:
        for p, v in zip(params, best_values):
            p.value[...] = v
    return TrainingReport(history, best_epoch, float(best_auc))


def save_classifier(path, clf: ClassifierHead, include_adam: bool = False) -> None:
    save_network(path, clf.net, include_adam=include_adam,
                 appendix=_APPENDIX.pack(clf.max_timestep))


def load_classifier(path, clf: ClassifierHead) -> None:
    appendix = load_network(path, clf.net)
    if appendix is None or len(appendix) != _APPENDIX.size:
        raise ValueError("checkpoint lacks the timestep-range appendix")
    (clf.max_timestep,) = _APPENDIX.unpack(appendix)
