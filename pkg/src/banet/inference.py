"""Whole-volume prediction and evaluation.

Volumes larger than the training patch are covered by a sliding window whose
stride is patch_size * (1 - overlap); window probabilities are averaged
uniformly wherever windows overlap, then renormalized across classes.
Volumes smaller than the patch are zero-padded at the high end and the
output is cropped back.  When a single window covers the volume exactly, its
probabilities are returned untouched, so the result matches a direct forward
pass bit for bit.

Accumulation runs in float64 so that averaging n identical windows (or
ensembling n identical models) is exact: n*a and (n*a)/n round-trip without
error for float32 payloads.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import DataError
from .network import BaNet, forward_infer
from .volume import LabelVolume, Volume, resample_volume


@dataclass
class Prediction:
    """Class probabilities (K, D, H, W) float32 and their argmax labels."""
    probs: np.ndarray
    labels: np.ndarray
    spacing: tuple[float, float, float]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]


def _axis_starts(size: int, patch: int, overlap: float) -> list[int]:
    if size == patch:
        return [0]
    stride = max(1, int(round(patch * (1.0 - overlap))))
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def sliding_window_predict(net: BaNet, vol: Volume,
                           patch_dims: tuple[int, int, int],
                           overlap: float = 0.0) -> Prediction:
    """Predict one (already normalized) volume with a sliding window."""
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    dims = vol.data.shape
    padded_dims = tuple(max(d, p) for d, p in zip(dims, patch_dims))
    x = vol.data
    if padded_dims != dims:
        x = np.zeros(padded_dims, dtype=np.float32)
        x[:dims[0], :dims[1], :dims[2]] = vol.data
    k = net.config.num_classes
    starts = [_axis_starts(s, p, overlap) for s, p in zip(padded_dims, patch_dims)]
    if all(len(s) == 1 for s in starts) and padded_dims == tuple(patch_dims):
        probs_full = forward_infer(net, Tensor(np.ascontiguousarray(
            x[None, None], dtype=np.float32))).data[0]
    else:
        acc = np.zeros((k,) + padded_dims, dtype=np.float64)
        count = np.zeros(padded_dims, dtype=np.float64)
        for sz in starts[0]:
            for sy in starts[1]:
                for sx in starts[2]:
                    sl = (slice(sz, sz + patch_dims[0]), slice(sy, sy + patch_dims[1]),
                          slice(sx, sx + patch_dims[2]))
                    patch = np.ascontiguousarray(x[sl][None, None], dtype=np.float32)
                    p = forward_infer(net, Tensor(patch)).data[0]
                    acc[(slice(None),) + sl] += p
                    count[sl] += 1.0
        acc /= count
        acc /= np.sum(acc, axis=0)
        probs_full = acc.astype(np.float32)
    probs = np.ascontiguousarray(probs_full[:, :dims[0], :dims[1], :dims[2]])
    labels = np.argmax(probs, axis=0).astype(np.uint8)
    return Prediction(probs, labels, vol.spacing)


def ensemble(predictions: list[Prediction]) -> Prediction:
    """Average class probabilities of several predictions, then re-argmax.

    All predictions must share grid and spacing.  Ties in the argmax resolve
    to the lowest class index.
    """
    if not predictions:
        raise ValueError("ensemble of zero predictions")
    first = predictions[0]
    for p in predictions[1:]:
        if p.probs.shape != first.probs.shape:
            raise DataError(f"ensemble shape mismatch: {p.probs.shape} "
                            f"vs {first.probs.shape}")
        if p.spacing != first.spacing:
            raise DataError(f"ensemble spacing mismatch: {p.spacing} vs {first.spacing}")
    acc = np.zeros(first.probs.shape, dtype=np.float64)
    for p in predictions:
        acc += p.probs
    acc /= len(predictions)
    probs = acc.astype(np.float32)
    labels = np.argmax(probs, axis=0).astype(np.uint8)
    return Prediction(probs, labels, first.spacing)


def resample_prediction(pred: Prediction, target_spacing) -> Prediction:
    """Trilinearly resample class probabilities onto another grid spacing,
    renormalize, re-argmax.  Lets differently-spaced models be ensembled."""
    channels = [resample_volume(Volume(pred.probs[c], pred.spacing, "PROB"),
                                target_spacing).data
                for c in range(pred.num_classes)]
    probs = np.stack(channels).astype(np.float64)
    total = np.sum(probs, axis=0)
    if np.any(total <= 0):
        raise DataError("resampled probabilities sum to zero somewhere")
    probs /= total
    probs32 = probs.astype(np.float32)
    labels = np.argmax(probs32, axis=0).astype(np.uint8)
    return Prediction(probs32, labels, tuple(float(s) for s in target_spacing))


@dataclass
class DiceReport:
    """Dice per foreground class (index 0 is class 1) plus their mean."""
    per_class: list[float]
    mean: float


def dice_score(pred: LabelVolume, gt: LabelVolume, num_classes: int) -> DiceReport:
    """Hard Dice 2|P∩G| / (|P|+|G|) per foreground class.

    Both masks empty counts as a perfect 1.0; exactly one empty scores 0.0.
    Accepts LabelVolumes or bare label arrays.
    """
    pa = pred.data if isinstance(pred, LabelVolume) else np.asarray(pred)
    ga = gt.data if isinstance(gt, LabelVolume) else np.asarray(gt)
    if pa.shape != ga.shape:
        raise DataError(f"dice_score: prediction {pa.shape} vs labels {ga.shape}")
    per_class = []
    for c in range(1, num_classes):
        p = pa == c
        g = ga == c
        denom = int(p.sum()) + int(g.sum())
        if denom == 0:
            per_class.append(1.0)
        else:
            per_class.append(2.0 * int(np.logical_and(p, g).sum()) / denom)
    mean = float(np.mean(per_class)) if per_class else 1.0
    return DiceReport(per_class, mean)


def prediction_to_labels(pred: Prediction) -> LabelVolume:
    return LabelVolume(pred.labels, pred.spacing, pred.num_classes)


def write_dice_csv(report: DiceReport, path) -> None:
    """One report as CSV: a row per foreground class, then a mean row."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "dice"])
        for i, val in enumerate(report.per_class):
            w.writerow([i + 1, repr(float(val))])
        w.writerow(["mean", repr(float(report.mean))])
