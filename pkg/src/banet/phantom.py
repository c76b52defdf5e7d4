"""Synthetic multi-organ phantoms.

Each phantom is a volume of random axis-aligned ellipsoid "organs" on a zero
background.  Organ k (1-based) gets mean intensity k * contrast_gap, and the
whole volume is corrupted with white Gaussian noise.  Later organs overwrite
earlier ones where they overlap.  Radius ranges are per-organ, so the default
configuration spans one large and two progressively tiny structures — a
deliberately unbalanced foreground (the large organ has well over 20x the
voxels of the smallest).

Generation is deterministic in the seed.  If some organ ends up with no
voxels (possible only through overlap, since each ellipsoid contains its
center), all shapes are redrawn from the same stream, up to a bounded number
of attempts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .volume import LabelVolume, Volume

_MAX_ATTEMPTS = 20


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (32, 32, 32)
    num_organs: int = 3
    radius_ranges: tuple[tuple[float, float], ...] = ((10.5, 11.5), (4.5, 5.5), (3.2, 3.8))
    contrast_gap: float = 0.15
    noise_sigma: float = 0.1
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be positive, got {self.dims}")
        if self.num_organs < 0:
            raise ValueError(f"num_organs must be >= 0, got {self.num_organs}")
        if len(self.radius_ranges) != self.num_organs:
            raise ValueError(f"need {self.num_organs} radius ranges, "
                             f"got {len(self.radius_ranges)}")
        for lo, hi in self.radius_ranges:
            if not (0 < lo <= hi):
                raise ValueError(f"bad radius range ({lo}, {hi})")
            margin = float(np.ceil(hi))
            if any(2 * margin >= d - 1 for d in self.dims):
                raise ValueError(f"radius up to {hi} cannot fit in dims {self.dims}")
        if self.contrast_gap < 0 or self.noise_sigma < 0:
            raise ValueError("contrast_gap and noise_sigma must be >= 0")


def _draw_organs(rng: np.random.Generator, cfg: PhantomConfig) -> np.ndarray:
    labels = np.zeros(cfg.dims, dtype=np.uint8)
    grids = np.ogrid[0:cfg.dims[0], 0:cfg.dims[1], 0:cfg.dims[2]]
    for k, (lo, hi) in enumerate(cfg.radius_ranges, start=1):
        radii = rng.uniform(lo, hi, size=3)
        center = np.empty(3)
        for ax in range(3):
            margin = float(np.ceil(radii[ax]))
            center[ax] = rng.uniform(margin, cfg.dims[ax] - 1 - margin)
        dist = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
        labels[dist <= 1.0] = k
    return labels


def generate_phantom(cfg: PhantomConfig) -> tuple[Volume, LabelVolume]:
    """One (image, labels) pair; image modality is SYNTH, spacing from cfg."""
    rng = np.random.default_rng(cfg.seed)
    for _ in range(_MAX_ATTEMPTS):
        labels = _draw_organs(rng, cfg)
        present = np.unique(labels)
        if all(k in present for k in range(1, cfg.num_organs + 1)):
            break
    else:
        raise DataError(f"could not place all {cfg.num_organs} organs "
                        f"in {_MAX_ATTEMPTS} attempts (seed {cfg.seed})")
    image = labels.astype(np.float32) * np.float32(cfg.contrast_gap)
    image += rng.normal(0.0, cfg.noise_sigma, size=cfg.dims).astype(np.float32)
    return (Volume(image, cfg.spacing, modality="SYNTH"),
            LabelVolume(labels, cfg.spacing, cfg.num_organs + 1))
