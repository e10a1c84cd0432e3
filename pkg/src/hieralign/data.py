"""Synthetic datasets and dataset validation probes.

Crossover mode composes a class-determined global layout (large soft blobs
plus a low-frequency wave) with class-independent fine texture, so coarse
structure is class-informative while fine detail is instance-specific. A
linear probe on frozen encoder features checks that the deep group predicts
class better than the mid group.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError
from .ppm import read_ppm


@dataclass
class SyntheticDataset:
    images: np.ndarray  # (N, 3, side, side) float32 in [-1, 1]
    labels: np.ndarray  # (N,) int64 in [0, num_classes)
    num_classes: int
    seed: int
    crossover_mode: bool

    def __len__(self) -> int:
        return self.images.shape[0]


def gen_synthetic_dataset(n: int, num_classes: int, image_side: int, seed: int,
                          crossover_mode: bool = True) -> SyntheticDataset:
    """Deterministic synthetic image set; byte-identical given the same seed.

    In crossover mode every class draws its large blobs from one shared color
    palette, so class identity is carried purely by the coarse arrangement
    (which grid cell holds which palette color), while a sea of small
    distractor blobs plus band-passed noise supplies instance-specific fine
    structure. Without crossover mode, classes get their own colors and the
    class signal is present at every scale.
    """
    if n < 1:
        raise ConfigError("dataset size must be >= 1")
    if num_classes < 2:
        raise ConfigError("need at least 2 classes")
    g = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 7041])))
    labels = np.arange(n, dtype=np.int64) % num_classes
    g.shuffle(labels)
    pal_g = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 7042])))
    palette = pal_g.uniform(-1.0, 1.0, (3, 3))
    protos = []
    for c in range(num_classes):
        cg = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 7040, c])))
        protos.append({
            "cells": cg.choice(9, size=3, replace=False),
            "perm": cg.permutation(3),
            "colors": cg.uniform(-1.0, 1.0, (3, 3)),  # used without crossover
        })

    ax = (np.arange(image_side) + 0.5) / image_side
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    images = np.empty((n, 3, image_side, image_side), dtype=np.float32)
    for i in range(n):
        p = protos[labels[i]]
        img = np.zeros((3, image_side, image_side))
        jitter = 0.06 * g.standard_normal((3, 2))
        amps = 0.8 * (0.85 + 0.3 * g.random(3))
        for k in range(3):
            cy = (p["cells"][k] // 3 + 0.5) / 3 + jitter[k, 0]
            cx = (p["cells"][k] % 3 + 0.5) / 3 + jitter[k, 1]
            color = palette[p["perm"][k]] if crossover_mode else p["colors"][k]
            blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.16**2)))
            img += amps[k] * color[:, None, None] * blob

        if crossover_mode:
            # instance detail: many small random blobs and band-passed noise
            for _ in range(24):
                cy, cx = g.random(2)
                col = g.uniform(-1.0, 1.0, 3)
                img += 0.9 * col[:, None, None] * np.exp(
                    -(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.04**2)))
            noise = g.standard_normal((image_side, image_side))
            band = gaussian_filter(noise, 0.6) - gaussian_filter(noise, 1.8)
            band /= max(float(band.std()), 1e-8)
            img += 0.35 * band
        else:
            img += 0.05 * g.standard_normal((3, image_side, image_side))

        images[i] = np.clip(img, -1.0, 1.0).astype(np.float32)
    return SyntheticDataset(images, labels, num_classes, seed, crossover_mode)


def load_image_folder(path, image_side: int, num_classes: int) -> SyntheticDataset:
    """Ingest class_<label>/*.ppm (or .npy) files as a dataset."""
    root = Path(path)
    if not root.is_dir():
        raise ConfigError(f"image folder not found: {root}")
    images, labels = [], []
    for class_dir in sorted(root.glob("class_*")):
        label = int(class_dir.name.split("_", 1)[1])
        if not 0 <= label < num_classes:
            raise ConfigError(f"label {label} outside [0, {num_classes})")
        for f in sorted(class_dir.iterdir()):
            if f.suffix == ".ppm":
                arr = read_ppm(f).astype(np.float32) / 255.0 * 2.0 - 1.0
                arr = np.moveaxis(arr, -1, 0)
            elif f.suffix == ".npy":
                arr = np.load(f).astype(np.float32)
            else:
                continue
            if arr.shape != (3, image_side, image_side):
                raise ConfigError(f"{f}: expected (3, {image_side}, {image_side}), got {arr.shape}")
            images.append(arr)
            labels.append(label)
    if not images:
        raise ConfigError(f"no .ppm/.npy images under {root}")
    return SyntheticDataset(np.stack(images), np.asarray(labels, dtype=np.int64),
                            num_classes, seed=0, crossover_mode=False)


# ---------------------------------------------------------------------------
# linear probe validation of the engineered hierarchy
# ---------------------------------------------------------------------------

def _ovr_auc(scores: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    """Macro one-vs-rest AUC from per-class scores via the rank statistic."""
    aucs = []
    for c in range(num_classes):
        s = scores[:, c]
        pos = labels == c
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            continue
        order = np.argsort(s, kind="mergesort")
        ranks = np.empty_like(order, dtype=np.float64)
        ranks[order] = np.arange(1, s.size + 1)
        # midranks for ties
        for v in np.unique(s):
            tie = s == v
            if tie.sum() > 1:
                ranks[tie] = ranks[tie].mean()
        auc = (ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
        aucs.append(auc)
    return float(np.mean(aucs))


def _ridge_probe(x_train, y_train, x_test, num_classes: int, ridge: float = 1e-2) -> np.ndarray:
    mu, sd = x_train.mean(axis=0), x_train.std(axis=0) + 1e-8
    xtr = (x_train - mu) / sd
    xte = (x_test - mu) / sd
    onehot = np.eye(num_classes)[y_train] * 2.0 - 1.0
    a = xtr.T @ xtr + ridge * xtr.shape[0] * np.eye(xtr.shape[1])
    w = np.linalg.solve(a, xtr.T @ onehot)
    return xte @ w


@dataclass
class ProbeReport:
    auc_mid: float
    auc_deep: float

    @property
    def gap(self) -> float:
        return self.auc_deep - self.auc_mid


def group_probe_features(encoder, partition, images: np.ndarray, grid_side: int,
                         batch_size: int = 256) -> dict[str, np.ndarray]:
    """Token-averaged per-layer features, concatenated per group: (N, K_g*C_g)."""
    from .encoder import encode_hierarchy

    feats = {"mid": [], "deep": []}
    for lo in range(0, images.shape[0], batch_size):
        bank = encode_hierarchy(encoder, partition, images[lo : lo + batch_size], grid_side)
        for gid in feats:
            toks = bank.tokens(gid)  # (B, K, L, C)
            feats[gid].append(toks.mean(axis=2).reshape(toks.shape[0], -1))
    return {gid: np.concatenate(v, axis=0) for gid, v in feats.items()}


def validate_crossover(dataset: SyntheticDataset, encoder, partition, grid_side: int,
                       seed: int = 0, train_frac: float = 0.7) -> ProbeReport:
    """Linear-probe check that deep features are more class-informative than mid."""
    feats = group_probe_features(encoder, partition, dataset.images, grid_side)
    n = len(dataset)
    order = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    n_train = int(train_frac * n)
    tr, te = order[:n_train], order[n_train:]
    aucs = {}
    for gid in ("mid", "deep"):
        scores = _ridge_probe(feats[gid][tr], dataset.labels[tr], feats[gid][te],
                              dataset.num_classes)
        aucs[gid] = _ovr_auc(scores, dataset.labels[te], dataset.num_classes)
    return ProbeReport(aucs["mid"], aucs["deep"])
