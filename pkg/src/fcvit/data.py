"""Procedural 4-class image set used for desk-scale training checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLASSES = ("horizontal_stripes", "vertical_stripes", "disk", "checkerboard")


@dataclass(frozen=True)
class ToyDatasetSpec:
    samples_per_class: int = 128
    seed: int = 0
    size: int = 32
    noise: float = 0.1
    classes: int = 4

    def __post_init__(self):
        if self.classes != len(CLASSES):
            raise ValueError(f"the toy set has exactly {len(CLASSES)} classes")
        if self.samples_per_class < 1 or self.size < 8:
            raise ValueError("need at least one sample per class and 8x8 images")


def pattern(label: int, size: int = 32, phase: int = 0, radius: float | None = None) -> np.ndarray:
    """Noiseless binary pattern for one class, shape (size, size)."""
    yy, xx = np.mgrid[:size, :size]
    if label == 0:
        return (((yy + phase) // 2) % 2).astype(np.float32)
    if label == 1:
        return (((xx + phase) // 2) % 2).astype(np.float32)
    if label == 2:
        r = size / 4 if radius is None else radius
        c = (size - 1) / 2
        return ((yy - c) ** 2 + (xx - c) ** 2 <= r * r).astype(np.float32)
    if label == 3:
        return ((((yy + phase) // 4) + ((xx + phase) // 4)) % 2).astype(np.float32)
    raise ValueError(f"unknown class {label}")


def gen_toy_dataset(spec: ToyDatasetSpec = ToyDatasetSpec()) -> tuple[np.ndarray, np.ndarray]:
    """Class-balanced shuffled images (N, 3, size, size) float32 and int64 labels."""
    rng = np.random.default_rng(spec.seed)
    n = spec.samples_per_class * spec.classes
    labels = np.repeat(np.arange(spec.classes), spec.samples_per_class)
    images = np.empty((n, 3, spec.size, spec.size), dtype=np.float32)
    for i, label in enumerate(labels):
        base = pattern(int(label), spec.size, phase=int(rng.integers(4)),
                       radius=float(rng.uniform(spec.size / 6, spec.size / 3)))
        images[i] = base[None] + spec.noise * rng.standard_normal((3, spec.size, spec.size))
    order = rng.permutation(n)
    return images[order], labels[order]
