"""Synthetic hyperspectral scenes with known ground truth.

Spatial layout is a Voronoi partition of seeded points with one class per
region; every class gets a smooth spectral signature (a sum of random Gaussian
bumps over the band axis) and pixels add i.i.d. Gaussian noise per band.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hsi_io import HsiCube, LabelRaster


@dataclass(frozen=True)
class SynthSpec:
    height: int = 64
    width: int = 64
    bands: int = 16
    classes: int = 4
    regions: int = 8
    noise_std: float = 0.3
    holdout_fraction: float = 0.0   # fraction of pixels left unlabeled
    seed: int = 0

    def __post_init__(self):
        if self.classes > self.regions:
            raise ValueError("need at least one region per class")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")


def class_signatures(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """One smooth signature per class: 3-5 signed Gaussian bumps over bands."""
    bands = np.arange(spec.bands, dtype=np.float64)
    sigs = np.zeros((spec.classes, spec.bands))
    for k in range(spec.classes):
        n_bumps = int(rng.integers(3, 6))
        for _ in range(n_bumps):
            center = rng.uniform(0, spec.bands - 1)
            width = rng.uniform(1.0, max(1.5, spec.bands / 4))
            amp = rng.uniform(0.6, 1.4) * rng.choice([-1.0, 1.0])
            sigs[k] += amp * np.exp(-0.5 * ((bands - center) / width) ** 2)
    return sigs


def generate(spec: SynthSpec) -> tuple[HsiCube, LabelRaster]:
    rng = np.random.default_rng(spec.seed)
    sigs = class_signatures(spec, rng)

    seeds_y = rng.uniform(0, spec.height, size=spec.regions)
    seeds_x = rng.uniform(0, spec.width, size=spec.regions)
    # round-robin class assignment keeps every class spread over several
    # regions; purely random assignment can leave a class a single tiny cell
    region_class = rng.permuted(np.arange(spec.regions) % spec.classes)

    yy, xx = np.mgrid[0: spec.height, 0: spec.width]
    d2 = (yy[..., None] - seeds_y) ** 2 + (xx[..., None] - seeds_x) ** 2
    region = np.argmin(d2, axis=2)
    classes = region_class[region]  # (H, W) in 0..K-1

    data = sigs[classes].astype(np.float64)
    if spec.noise_std > 0:
        data = data + rng.normal(0.0, spec.noise_std, size=data.shape)

    labels = (classes + 1).astype(np.int32)
    if spec.holdout_fraction > 0:
        mask = rng.uniform(size=labels.shape) < spec.holdout_fraction
        labels = np.where(mask, 0, labels)

    cube = HsiCube(spec.height, spec.width, spec.bands, data)
    raster = LabelRaster(spec.height, spec.width, spec.classes, labels)
    return cube, raster
