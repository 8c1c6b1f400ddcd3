"""Noisy disk-on-background images with known masks, for smoke tests."""

from __future__ import annotations

import numpy as np

DISK_COLOR = (0.55, 0.35, 0.25)
BACKGROUND_COLOR = (0.85, 0.70, 0.60)


def noisy_disk(seed: int, size: int = 64, noise: float = 0.05, channels: int = 3):
    """Return (pixels H x W x C in [0,1], boolean disk mask).

    The disk centre and radius are drawn from ``seed``; the same generator
    then adds Gaussian noise of standard deviation ``noise``.
    """
    rng = np.random.default_rng(seed)
    r = rng.uniform(0.18, 0.3) * size
    cy, cx = rng.uniform(0.35, 0.65, size=2) * size
    yy, xx = np.mgrid[0:size, 0:size]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    fg = np.array(DISK_COLOR[:channels] if channels == 3 else [np.mean(DISK_COLOR)])
    bg = np.array(BACKGROUND_COLOR[:channels] if channels == 3 else [np.mean(BACKGROUND_COLOR)])
    img = np.where(mask[..., None], fg, bg) + rng.normal(0.0, noise, size=(size, size, channels))
    return np.clip(img, 0.0, 1.0), mask


def small_image_model(seed: int = 0):
    """Encoder sized for 64 x 64 inputs: one block, 9-wide attention kernel."""
    from .model import ModelConfig

    return ModelConfig(channels=32, n_blocks=1, lka_kernel=9, seed=seed, dtype="float32")


def run_seeds(seeds, model_cfg=None, optim_cfg=None, weights=None, size: int = 64):
    """Train on one noisy disk per seed; return the per-seed ImageMetrics."""
    import dataclasses

    from . import metrics as Me
    from .losses import SKIN
    from .pipeline import preprocess
    from .trainer import OptimConfig, train_single_image

    out = []
    for seed in seeds:
        pixels, mask = noisy_disk(seed, size)
        mcfg = dataclasses.replace(model_cfg or small_image_model(), seed=seed)
        ocfg = dataclasses.replace(optim_cfg or OptimConfig(), seed=seed)
        labels, _, _ = train_single_image(preprocess(pixels), mcfg, ocfg, weights or SKIN)
        out.append(Me.evaluate(f"disk{seed}", labels, mask))
    return out
