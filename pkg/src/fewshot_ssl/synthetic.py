"""Procedurally textured image classes for desk-scale experiments.

Each class is an oriented periodic texture (sine, square-wave or plaid) with
its own orientation and frequency.  Per image the phase, contrast, colour,
and a small orientation/frequency jitter vary, and every image carries the
same scene lighting: brighter towards the top, warmer towards the left.  The
lighting gives rotation and tile-position tasks something to latch onto,
much as sky and ground do in photographs.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .data import LabeledImage

PATTERNS = ("sine", "square", "plaid")


def class_parameters(n_classes: int, seed: int = 0) -> list[dict]:
    rng = np.random.default_rng([seed, 7])
    offsets = rng.permutation(n_classes)
    return [
        {
            "theta": float(np.pi * (offsets[c] + rng.uniform(-0.2, 0.2)) / n_classes),
            "freq": float(rng.uniform(2.5, 7.0)),
            "pattern": PATTERNS[c % len(PATTERNS)],
        }
        for c in range(n_classes)
    ]


def render(params: dict, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    theta = params["theta"] + rng.normal(0, 0.06)
    freq = params["freq"] * rng.uniform(0.9, 1.1)
    phase = rng.uniform(0, 2 * np.pi)
    u = np.cos(theta) * xx + np.sin(theta) * yy
    wave = np.sin(2 * np.pi * freq * u + phase)
    if params["pattern"] == "square":
        wave = np.sign(wave)
    elif params["pattern"] == "plaid":
        v = -np.sin(theta) * xx + np.cos(theta) * yy
        wave = 0.5 * (wave + np.sin(2 * np.pi * freq * v + rng.uniform(0, 2 * np.pi)))
    base = rng.uniform(0.3, 0.7, size=3)
    tint = rng.uniform(0.4, 1.0, size=3)
    amp = rng.uniform(0.12, 0.25)
    img = base + amp * wave[..., None] * tint
    img += rng.uniform(0.12, 0.25) * (0.5 - yy)[..., None]
    img += rng.uniform(0.06, 0.15) * (0.5 - xx)[..., None] * np.array([1.0, 0.0, -1.0])
    img += rng.normal(0, 0.04, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synthetic_images(n_classes: int = 10, per_class: int = 100, size: int = 64, seed: int = 0) -> list[LabeledImage]:
    params = class_parameters(n_classes, seed)
    out = []
    for c, p in enumerate(params):
        rng = np.random.default_rng([seed, c])
        for i in range(per_class):
            out.append(LabeledImage(render(p, size, rng), c, f"synthetic/class_{c:03d}/{i:04d}.png"))
    return out


def write_synthetic_dataset(root, n_classes: int = 10, per_class: int = 100, size: int = 64, seed: int = 0) -> Path:
    root = Path(root)
    for item in synthetic_images(n_classes, per_class, size, seed):
        path = root / Path(item.source_path).relative_to("synthetic")
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.round(item.image * 255).astype(np.uint8)).save(path)
    return root
