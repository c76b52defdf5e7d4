"""Supervision targets and losses.

Both decoders are supervised at every scale they emit (all but the coarsest
level).  Targets per scale are built by even-index downsampling of the label
grid; the boundary map is extracted *after* downsampling so each scale sees
the boundary of its own grid, not a shrunken full-resolution boundary.

Scale weights halve with depth: weight(s) ∝ 2^-s over the supervised scales,
normalized to sum to 1, finest scale first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, accumulate_grad, add, record_op, scalar_mul
from .volume import LabelVolume

DICE_EPSILON = 1e-5
_CLIP_LO = 1e-7
_CLIP_HI = 1.0 - 1e-7


def downsample_labels(labels: np.ndarray, scale: int) -> np.ndarray:
    """Even-index subsampling of the last three axes by 2**scale."""
    if scale < 0:
        raise ValueError(f"scale must be >= 0, got {scale}")
    step = 2 ** scale
    return labels[..., ::step, ::step, ::step]


def boundary_mask(labels: np.ndarray) -> np.ndarray:
    """Binary mask of foreground voxels with a differing 6-face neighbour.

    Out-of-range neighbours count as background, so foreground touching the
    volume edge is boundary.  Works on (..., D, H, W) arrays.
    """
    pad = [(0, 0)] * (labels.ndim - 3) + [(1, 1)] * 3
    p = np.pad(labels, pad, mode="constant", constant_values=0)
    core = p[..., 1:-1, 1:-1, 1:-1]
    differs = (
        (p[..., :-2, 1:-1, 1:-1] != core) | (p[..., 2:, 1:-1, 1:-1] != core)
        | (p[..., 1:-1, :-2, 1:-1] != core) | (p[..., 1:-1, 2:, 1:-1] != core)
        | (p[..., 1:-1, 1:-1, :-2] != core) | (p[..., 1:-1, 1:-1, 2:] != core)
    )
    return ((labels != 0) & differs).astype(np.uint8)


def label_pyramid(lab: LabelVolume, scales: int) -> list[LabelVolume]:
    """Label volume at scales 0..scales-1 (scale s downsampled by 2**s)."""
    if scales < 1:
        raise ValueError(f"scales must be >= 1, got {scales}")
    divisor = 2 ** (scales - 1)
    if any(d % divisor for d in lab.data.shape):
        raise ValueError(f"dims {lab.data.shape} not divisible by 2^(scales-1) = {divisor}")
    return [LabelVolume(np.ascontiguousarray(downsample_labels(lab.data, s)),
                        tuple(sp * 2 ** s for sp in lab.spacing), lab.num_classes)
            for s in range(scales)]


def extract_boundary(lab: LabelVolume) -> LabelVolume:
    """Binary boundary labels (num_classes=2) of a label volume."""
    return LabelVolume(boundary_mask(lab.data), lab.spacing, 2)


def one_hot_array(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(N, D, H, W) integer labels -> (N, K, D, H, W) one-hot."""
    if labels.max(initial=0) >= num_classes:
        raise ValueError(f"label {int(labels.max())} out of range for {num_classes} classes")
    eye = np.eye(num_classes, dtype=dtype)
    return np.ascontiguousarray(eye[labels].transpose(0, 4, 1, 2, 3))


def one_hot(lab: LabelVolume, dtype=np.float32) -> Tensor:
    """One-hot tensor (1, K, D, H, W) of a single label volume."""
    return Tensor(one_hot_array(lab.data[None], lab.num_classes, dtype))


def deep_supervision_weights(levels: int) -> list[float]:
    """Per-scale loss weights for scales 0..levels-2, halving and normalized."""
    if levels < 2:
        raise ValueError(f"levels must be >= 2, got {levels}")
    raw = [2.0 ** -s for s in range(levels - 1)]
    total = sum(raw)
    return [r / total for r in raw]


@dataclass
class SupervisionTargets:
    """One-hot targets for both decoders at every supervised scale.

    seg_onehot[s]: (N, K, ...) one-hot labels; boundary_onehot[s]: (N, 2, ...)
    one-hot boundary masks; omega[s]: scale weight.  Finest scale is index 0.
    """
    seg_onehot: list[Tensor]
    boundary_onehot: list[Tensor]
    omega: list[float]

    def __post_init__(self):
        if not (len(self.seg_onehot) == len(self.boundary_onehot) == len(self.omega)):
            raise ValueError("targets need one seg, boundary and weight entry per scale")
        if abs(sum(self.omega) - 1.0) > 1e-12:
            raise ValueError(f"scale weights must sum to 1, got {sum(self.omega)}")


def build_targets(labels: np.ndarray, num_classes: int, levels: int,
                  dtype=np.float32) -> SupervisionTargets:
    """Targets for a training batch of (N, D, H, W) integer labels."""
    seg, boundary = [], []
    for s in range(levels - 1):
        ys = np.ascontiguousarray(downsample_labels(labels, s))
        seg.append(Tensor(one_hot_array(ys, num_classes, dtype)))
        boundary.append(Tensor(one_hot_array(boundary_mask(ys), 2, dtype)))
    return SupervisionTargets(seg, boundary, deep_supervision_weights(levels))


def dice_ce_loss(probs: Tensor, target: Tensor) -> Tensor:
    """Soft Dice over foreground channels plus binary cross-entropy.

    Dice term: mean over channels c >= 1 of 1 - 2*sum(p*y)/(sum(p+y)+eps),
    sums running over batch and space.  CE term: mean over every element of
    -[y*log(p) + (1-y)*log(1-p)] with p clipped into [1e-7, 1-1e-7].
    """
    p = probs.data
    y = target.data
    if p.shape != y.shape:
        raise ValueError(f"dice_ce_loss: probs {p.shape} vs target {y.shape}")
    num_classes = p.shape[1]
    if num_classes < 2:
        raise ValueError("dice_ce_loss needs at least 2 channels")
    pc = np.clip(p, _CLIP_LO, _CLIP_HI)
    ce = -np.mean(y * np.log(pc) + (1.0 - y) * np.log1p(-pc), dtype=np.float64)
    axes = (0, 2, 3, 4)
    inter = np.sum(p * y, axis=axes, dtype=np.float64)
    total = np.sum(p + y, axis=axes, dtype=np.float64)
    dice = float(np.mean(1.0 - 2.0 * inter[1:] / (total[1:] + DICE_EPSILON)))
    out = Tensor(np.full((1, 1, 1, 1, 1), ce + dice, dtype=p.dtype))

    def bw(g: np.ndarray) -> None:
        gs = float(g.reshape(()))
        inside = (p >= _CLIP_LO) & (p <= _CLIP_HI)
        d_ce = np.where(inside, (-y / pc + (1.0 - y) / (1.0 - pc)) / p.size, 0.0)
        denom = total[1:] + DICE_EPSILON
        cf_y = np.zeros(num_classes)
        cf_1 = np.zeros(num_classes)
        cf_y[1:] = -2.0 / denom / (num_classes - 1)
        cf_1[1:] = 2.0 * inter[1:] / denom ** 2 / (num_classes - 1)
        shape = (1, num_classes, 1, 1, 1)
        d_dice = cf_y.reshape(shape) * y + cf_1.reshape(shape)
        accumulate_grad(probs, ((d_ce + d_dice) * gs).astype(p.dtype), owned=True)

    return record_op("dice_ce_loss", out, (probs,), bw)


def total_loss(seg_probs: list[Tensor], boundary_probs: list[Tensor],
               targets: SupervisionTargets) -> Tensor:
    """Weighted sum of per-scale losses over both decoders.

    boundary_probs may be empty (boundary branch disabled); otherwise it must
    cover the same scales as seg_probs.
    """
    scales = len(targets.seg_onehot)
    if len(seg_probs) != scales:
        raise ValueError(f"expected {scales} seg outputs, got {len(seg_probs)}")
    if boundary_probs and len(boundary_probs) != scales:
        raise ValueError(f"expected 0 or {scales} boundary outputs, got {len(boundary_probs)}")
    loss = None
    for s in range(scales):
        term = dice_ce_loss(seg_probs[s], targets.seg_onehot[s])
        if boundary_probs:
            term = add(term, dice_ce_loss(boundary_probs[s], targets.boundary_onehot[s]))
        term = scalar_mul(term, targets.omega[s])
        loss = term if loss is None else add(loss, term)
    return loss
