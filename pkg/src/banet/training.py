"""Training loop, optimizer, LR schedule, checkpoints.

One optimizer step = sample a batch of patches, forward both decoders, take
the deeply supervised loss, backprop through the tape, and apply SGD with
Nesterov momentum.  The learning rate follows a polynomial decay stepped
once per epoch.  Everything is driven by one PCG64 generator seeded from the
config, so a run is bitwise reproducible: identical loss traces and identical
checkpoint bytes.

Checkpoints are a `<prefix>.ckpt.json` manifest (tensor names/shapes/offsets,
configs, epoch, RNG state) plus `<prefix>.ckpt.raw` holding every parameter
tensor followed by every momentum buffer, float32 little-endian, in manifest
order.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tape, Tensor, backward
from .errors import DataError, NumericalError
from .network import BaNet, NetworkConfig, build, forward_train
from .supervision import build_targets, total_loss
from .volume import LabelVolume, Volume

_CKPT_FORMAT = "banet-checkpoint-v1"


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    max_epochs: int = 200
    steps_per_epoch: int = 10
    batch_size: int = 2
    momentum: float = 0.99
    nesterov: bool = True
    patch_dims: tuple[int, int, int] = (32, 32, 32)
    fg_oversample_prob: float = 1.0 / 3.0
    seed: int = 0

    def __post_init__(self):
        if self.lr0 < 0 or self.max_epochs < 1 or self.steps_per_epoch < 1:
            raise ValueError("lr0 must be >= 0; max_epochs and steps_per_epoch >= 1")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0.0 <= self.fg_oversample_prob <= 1.0:
            raise ValueError("fg_oversample_prob must be in [0, 1]")


def poly_lr(epoch: int, cfg: TrainConfig, exponent: float = 0.9) -> float:
    """Polynomial decay: lr0 * (1 - epoch/max_epochs) ** exponent."""
    if not 0 <= epoch <= cfg.max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.max_epochs}]")
    return cfg.lr0 * (1.0 - epoch / cfg.max_epochs) ** exponent


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(net: BaNet, state: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    """SGD with (optionally Nesterov) momentum, applied in place.

    v <- mu*v + g; update = g + mu*v (Nesterov) or v; theta <- theta - lr*update.
    """
    mu = cfg.momentum
    for name, p in net.parameters():
        g = p.grad
        if g is None:
            raise NumericalError(f"parameter {name} has no gradient; "
                                 "did backward() run on this tape?")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            state.velocity[name] = v
        np.multiply(v, p.data.dtype.type(mu), out=v)
        v += g
        update = g + mu * v if cfg.nesterov else v
        p.data -= p.data.dtype.type(lr) * update


def _crop_patch(image: np.ndarray, labels: np.ndarray,
                patch_dims: tuple[int, int, int], fg_prob: float,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Crop co-registered image/label patches (array level).

    With probability fg_prob the patch is centered on a uniformly chosen
    foreground voxel (clamped so the patch fits); otherwise its origin is
    uniform over all valid positions.  Volumes without foreground always take
    the uniform path.
    """
    dims = image.shape
    if any(p > d for p, d in zip(patch_dims, dims)):
        raise DataError(f"patch {patch_dims} larger than volume {dims}")
    max_start = [d - p for d, p in zip(dims, patch_dims)]
    use_fg = rng.random() < fg_prob
    fg = np.argwhere(labels != 0) if use_fg else None
    if use_fg and len(fg) > 0:
        center = fg[rng.integers(len(fg))]
        start = [int(np.clip(c - p // 2, 0, m))
                 for c, p, m in zip(center, patch_dims, max_start)]
    else:
        start = [int(rng.integers(m + 1)) for m in max_start]
    sl = tuple(slice(s, s + p) for s, p in zip(start, patch_dims))
    return image[sl], labels[sl]


def sample_patch(img: Volume, y: LabelVolume, cfg: TrainConfig,
                 rng: np.random.Generator) -> tuple[Tensor, LabelVolume]:
    """Draw one training patch as a (1, 1, D, H, W) tensor plus its labels."""
    if img.data.shape != y.data.shape:
        raise DataError(f"image {img.data.shape} vs labels {y.data.shape}")
    ip, lp = _crop_patch(img.data, y.data, cfg.patch_dims,
                         cfg.fg_oversample_prob, rng)
    x = np.ascontiguousarray(ip, dtype=np.float32)[None, None]
    return Tensor(x), LabelVolume(lp.copy(), img.spacing, y.num_classes)


def _assemble_batch(dataset: Sequence[tuple[Volume, LabelVolume]], cfg: TrainConfig,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    imgs, labs = [], []
    for _ in range(cfg.batch_size):
        vol, lab = dataset[int(rng.integers(len(dataset)))]
        ip, lp = _crop_patch(vol.data, lab.data, cfg.patch_dims,
                             cfg.fg_oversample_prob, rng)
        imgs.append(ip)
        labs.append(lp)
    x = np.ascontiguousarray(np.stack(imgs)[:, None], dtype=np.float32)
    y = np.ascontiguousarray(np.stack(labs))
    return x, y


def train(net: BaNet, dataset: Sequence[tuple[Volume, LabelVolume]], cfg: TrainConfig,
          out_prefix: Optional[str] = None) -> tuple["Checkpoint", list[float]]:
    """Run the full schedule; returns the final checkpoint and per-epoch mean losses.

    Expects image volumes already intensity-normalized.  If out_prefix is
    given, writes `<prefix>.ckpt.{json,raw}` and `<prefix>_loss.csv`.
    """
    if not dataset:
        raise DataError("empty training dataset")
    down = 2 ** (net.config.levels - 1)
    if any(p % down for p in cfg.patch_dims):
        raise DataError(f"patch_dims {cfg.patch_dims} not divisible by {down} "
                        f"(levels={net.config.levels})")
    for vol, lab in dataset:
        if vol.data.shape != lab.data.shape:
            raise DataError(f"image {vol.data.shape} vs labels {lab.data.shape}")
        if lab.num_classes != net.config.num_classes:
            raise DataError(f"dataset has {lab.num_classes} classes, "
                            f"network expects {net.config.num_classes}")
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState()
    trace: list[float] = []
    for epoch in range(cfg.max_epochs):
        lr = poly_lr(epoch, cfg)
        losses = []
        for step in range(cfg.steps_per_epoch):
            x, y = _assemble_batch(dataset, cfg, rng)
            targets = build_targets(y, net.config.num_classes, net.config.levels)
            with Tape() as tape:
                try:
                    seg_probs, bnd_probs = forward_train(net, Tensor(x))
                    loss = total_loss(seg_probs, bnd_probs, targets)
                    loss_val = loss.item()
                except (ZeroDivisionError, FloatingPointError) as e:
                    # overflowed activations can crash inside a compiled
                    # kernel before they ever reach the loss
                    culprit = tape.first_nonfinite_op()
                    detail = f"; first non-finite op: {culprit}" if culprit else ""
                    raise NumericalError(f"numerical failure at epoch {epoch} "
                                         f"step {step} ({e}){detail}")
                if not np.isfinite(loss_val):
                    culprit = tape.first_nonfinite_op()
                    detail = f"; first non-finite op: {culprit}" if culprit else ""
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch} step {step}{detail}")
                backward(loss)
            sgd_step(net, state, lr, cfg)
            net.zero_grads()
            losses.append(loss_val)
        trace.append(float(np.mean(losses)))
    ckpt = Checkpoint(
        net_config=net.config,
        params={name: p.data.copy() for name, p in net.parameters()},
        momentum={name: state.velocity[name].copy() for name, _ in net.parameters()},
        epoch=cfg.max_epochs,
        train_config=cfg,
        rng_state=rng.bit_generator.state,
    )
    if out_prefix is not None:
        save_checkpoint(ckpt, out_prefix)
        write_loss_trace(trace, cfg, str(out_prefix) + "_loss.csv")
    return ckpt, trace


def write_loss_trace(trace: list[float], cfg: TrainConfig, path) -> None:
    """CSV with columns epoch,mean_loss,lr (floats at full round-trip precision)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "mean_loss", "lr"])
        for epoch, mean_loss in enumerate(trace):
            w.writerow([epoch, repr(mean_loss), repr(poly_lr(epoch, cfg))])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    net_config: NetworkConfig
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    epoch: int
    train_config: Optional[TrainConfig] = None
    rng_state: Optional[dict] = None


def save_checkpoint(ckpt: Checkpoint, prefix) -> None:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    names = list(ckpt.params)
    tensors = []
    offset = 0
    for name in names:
        arr = ckpt.params[name]
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    manifest = {
        "format": _CKPT_FORMAT,
        "epoch": ckpt.epoch,
        "net_config": asdict(ckpt.net_config),
        "train_config": asdict(ckpt.train_config) if ckpt.train_config else None,
        "rng_state": ckpt.rng_state,
        "tensors": tensors,
    }
    with open(prefix.with_suffix(".ckpt.json"), "w") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")
    chunks = [np.ascontiguousarray(ckpt.params[n], dtype="<f4") for n in names]
    chunks += [np.ascontiguousarray(ckpt.momentum[n], dtype="<f4") for n in names]
    with open(prefix.with_suffix(".ckpt.raw"), "wb") as f:
        for c in chunks:
            f.write(c.tobytes())


def load_checkpoint(prefix) -> Checkpoint:
    prefix = Path(prefix)
    json_path = prefix.with_suffix(".ckpt.json")
    try:
        with open(json_path) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise DataError(f"missing checkpoint manifest {json_path}")
    except json.JSONDecodeError as e:
        raise DataError(f"invalid JSON in {json_path}: {e}")
    if manifest.get("format") != _CKPT_FORMAT:
        raise DataError(f"{json_path}: unknown checkpoint format {manifest.get('format')!r}")
    try:
        net_config = NetworkConfig(**{k: tuple(v) if isinstance(v, list) else v
                                      for k, v in manifest["net_config"].items()})
        tc_raw = manifest.get("train_config")
        train_config = None
        if tc_raw is not None:
            train_config = TrainConfig(**{k: tuple(v) if isinstance(v, list) else v
                                          for k, v in tc_raw.items()})
        tensors = manifest["tensors"]
        epoch = manifest["epoch"]
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{json_path}: malformed manifest ({e})")
    total = sum(int(np.prod(t["shape"])) for t in tensors)
    raw_path = prefix.with_suffix(".ckpt.raw")
    try:
        buf = raw_path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing checkpoint payload {raw_path}")
    if len(buf) != 2 * total * 4:
        raise DataError(f"{raw_path}: payload is {len(buf)} bytes, "
                        f"manifest implies {2 * total * 4}")
    flat = np.frombuffer(buf, dtype="<f4")
    params, momentum = {}, {}
    for t in tensors:
        shape = tuple(t["shape"])
        n = int(np.prod(shape))
        off = int(t["offset"])
        if off + n > total:
            raise DataError(f"{json_path}: tensor {t['name']} overruns the params section")
        params[t["name"]] = flat[off:off + n].reshape(shape).copy()
        momentum[t["name"]] = flat[total + off:total + off + n].reshape(shape).copy()
    return Checkpoint(net_config, params, momentum, epoch, train_config,
                      manifest.get("rng_state"))


def restore_network(ckpt: Checkpoint) -> BaNet:
    """Rebuild a network carrying exactly the checkpoint's parameters."""
    net = build(ckpt.net_config, seed=0)
    names = {name for name, _ in net.parameters()}
    if names != set(ckpt.params):
        missing = names ^ set(ckpt.params)
        raise DataError(f"checkpoint does not match architecture; mismatched tensors: "
                        f"{sorted(missing)[:4]}...")
    for name, p in net.parameters():
        arr = ckpt.params[name]
        if arr.shape != p.data.shape:
            raise DataError(f"checkpoint tensor {name} has shape {arr.shape}, "
                            f"expected {p.data.shape}")
        p.data = arr.astype(np.float32, copy=True)
    return net
