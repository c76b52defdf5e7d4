"""Command-line interface.

Subcommands: gen (synthetic data), train, infer, eval, gradcheck.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from .errors import DataError, NumericalError
from .gradcheck import format_results, run_suite
from .inference import (dice_score, ensemble, prediction_to_labels,
                        sliding_window_predict)
from .network import NetworkConfig, build
from .phantom import PhantomConfig, generate_phantom
from .training import TrainConfig, load_checkpoint, restore_network, train
from .volume import LabelVolume, Volume, normalize, read_labels, read_volume, write_pgm, write_volume


class _Parser(argparse.ArgumentParser):
    """argparse that exits with code 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _load_config(path, cls):
    """Instantiate a config dataclass from a JSON file, strictly."""
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise DataError(f"missing config file {path}")
    except json.JSONDecodeError as e:
        raise DataError(f"invalid JSON in {path}: {e}")
    if not isinstance(raw, dict):
        raise DataError(f"{path}: config must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise DataError(f"{path}: unknown keys {sorted(unknown)} for {cls.__name__}")
    try:
        return cls(**{k: _tuplify(v) for k, v in raw.items()})
    except (TypeError, ValueError) as e:
        raise DataError(f"{path}: {e}")


def _case_stem(i: int) -> str:
    return f"case_{i:04d}"


def cmd_gen(args) -> int:
    cfg = _load_config(args.config, PhantomConfig) if args.config else PhantomConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        vol, lab = generate_phantom(dataclasses.replace(cfg, seed=cfg.seed + i))
        stem = out / _case_stem(i)
        write_volume(vol, f"{stem}_image")
        write_volume(lab, f"{stem}_labels")
    print(f"wrote {args.count} phantom pair(s) to {out}")
    return 0


def _discover_pairs(data_dir: Path) -> list[tuple[Volume, LabelVolume]]:
    image_headers = sorted(data_dir.glob("*_image.json"))
    if not image_headers:
        raise DataError(f"no *_image.json volumes found in {data_dir}")
    pairs = []
    for img_path in image_headers:
        lab_path = img_path.with_name(img_path.name.replace("_image.json", "_labels.json"))
        if not lab_path.exists():
            raise DataError(f"no labels found for {img_path} (expected {lab_path})")
        pairs.append((read_volume(img_path), read_labels(lab_path)))
    return pairs


def cmd_train(args) -> int:
    pairs = _discover_pairs(Path(args.data))
    num_classes = pairs[0][1].num_classes
    for _, lab in pairs:
        if lab.num_classes != num_classes:
            raise DataError("training volumes disagree on num_classes")
    train_cfg = (_load_config(args.train, TrainConfig) if args.train else TrainConfig())
    if args.net:
        net_cfg = _load_config(args.net, NetworkConfig)
    else:
        net_cfg = NetworkConfig(levels=3, base_channels=8, num_classes=num_classes)
    if net_cfg.num_classes != num_classes:
        raise DataError(f"network expects {net_cfg.num_classes} classes, "
                        f"data has {num_classes}")
    dataset = [(normalize(vol), lab) for vol, lab in pairs]
    net = build(net_cfg, seed=train_cfg.seed)
    t0 = time.perf_counter()
    _, trace = train(net, dataset, train_cfg, out_prefix=args.out)
    dt = time.perf_counter() - t0
    print(f"trained {train_cfg.max_epochs} epochs in {dt:.1f}s; "
          f"final mean loss {trace[-1]:.4f}; checkpoint at {args.out}.ckpt.*")
    return 0


def cmd_infer(args) -> int:
    ckpts = [load_checkpoint(p) for p in args.ckpt.split(",")]
    vol = normalize(read_volume(args.input))
    if args.patch:
        patch = tuple(int(v) for v in args.patch.split(","))
        if len(patch) != 3:
            raise DataError(f"--patch needs 3 comma-separated ints, got {args.patch!r}")
    else:
        with_patch = [c for c in ckpts if c.train_config is not None]
        if not with_patch:
            raise DataError("no --patch given and checkpoint stores no patch dims")
        patch = tuple(with_patch[0].train_config.patch_dims)
    preds = []
    for ckpt in ckpts:
        net = restore_network(ckpt)
        preds.append(sliding_window_predict(net, vol, patch, overlap=args.overlap))
    pred = preds[0] if len(preds) == 1 else ensemble(preds)
    out = Path(args.out)
    write_volume(prediction_to_labels(pred), f"{out}_pred")
    if args.probs:
        k, d, h, w = pred.probs.shape
        stacked = Volume(pred.probs.reshape(k * d, h, w), pred.spacing, "PROB")
        write_volume(stacked, f"{out}_probs")
    if args.dump_midslice:
        write_pgm(pred.labels[pred.labels.shape[0] // 2], args.dump_midslice)
    print(f"wrote prediction to {out}_pred.json/.raw "
          f"({len(preds)} model(s), patch {patch}, overlap {args.overlap})")
    return 0


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    pred_headers = sorted(pred_dir.glob("*_pred.json"))
    if not pred_headers:
        raise DataError(f"no *_pred.json volumes found in {pred_dir}")
    rows = []
    means = []
    per_class_all: dict[int, list[float]] = {}
    for pred_path in pred_headers:
        case = pred_path.name[:-len("_pred.json")]
        gt_path = gt_dir / f"{case}_labels.json"
        if not gt_path.exists():
            raise DataError(f"no ground truth for {case} (expected {gt_path})")
        pred = read_labels(pred_path)
        gt = read_labels(gt_path)
        if pred.data.shape != gt.data.shape:
            raise DataError(f"{case}: prediction {pred.data.shape} vs labels {gt.data.shape}")
        report = dice_score(pred, gt, gt.num_classes)
        for c, val in enumerate(report.per_class, start=1):
            rows.append((case, str(c), val))
            per_class_all.setdefault(c, []).append(val)
        rows.append((case, "mean", report.mean))
        means.append(report.mean)
    for c in sorted(per_class_all):
        rows.append(("ALL", str(c), float(np.mean(per_class_all[c]))))
    overall = float(np.mean(means))
    rows.append(("ALL", "mean", overall))
    with open(args.report, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["case", "class", "dice"])
        for case, cls, val in rows:
            w.writerow([case, cls, repr(float(val))])
    print(f"mean Dice over {len(means)} case(s): {overall:.4f} (report: {args.report})")
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    results = run_suite(seed=args.seed)
    print(format_results(results))
    print(f"total: {time.perf_counter() - t0:.1f}s")
    if not all(r.passed for r in results):
        raise NumericalError("gradient check failed")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="banet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic phantom volumes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=1, help="number of phantom pairs")
    p.add_argument("--config", help="PhantomConfig JSON (holds the base seed; "
                                    "pair i uses seed+i)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a network on a directory of volume pairs")
    p.add_argument("--data", required=True, help="directory with *_image / *_labels pairs")
    p.add_argument("--out", required=True, help="checkpoint prefix")
    p.add_argument("--net", help="NetworkConfig JSON")
    p.add_argument("--train", help="TrainConfig JSON")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict a volume with one or more checkpoints")
    p.add_argument("--ckpt", required=True, help="checkpoint prefix(es), comma-separated")
    p.add_argument("--in", dest="input", required=True, metavar="VOLUME",
                   help="input volume (json or stem)")
    p.add_argument("--out", required=True, help="output stem")
    p.add_argument("--patch", help="patch dims d,h,w (default: from checkpoint)")
    p.add_argument("--overlap", type=float, default=0.0, help="window overlap in [0,1)")
    p.add_argument("--probs", action="store_true",
                   help="also dump class probabilities (classes stacked along z)")
    p.add_argument("--dump-midslice", help="write the axial midslice of the labels as PGM")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="Dice of predictions against ground truth")
    p.add_argument("--pred", required=True, help="directory with *_pred volumes")
    p.add_argument("--gt", required=True, help="directory with *_labels volumes")
    p.add_argument("--report", required=True, help="CSV report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
