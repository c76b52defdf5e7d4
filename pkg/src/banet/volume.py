"""Volumes on disk and in memory.

A volume is stored as a pair of files sharing one stem: `<stem>.json` holds
the header, `<stem>.raw` the payload.  The header is a flat JSON object:

    {"dims": [d, h, w], "spacing_mm": [z, y, x], "dtype": "f32" | "u8",
     "modality": "CT" | "MR" | "SYNTH", "num_classes": k}

`num_classes` is present for label volumes (dtype u8) only.  The payload is
raw little-endian scalars in z-major order (z slowest, x fastest), exactly
prod(dims) elements.  All malformed-input conditions raise DataError.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

CT_CLIP_RANGE = (-991.0, 373.0)

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


@dataclass
class Volume:
    """A scalar image volume: float32 data (D, H, W), spacing in mm (z, y, x)."""
    data: np.ndarray
    spacing: tuple[float, float, float]
    modality: str = "CT"


@dataclass
class LabelVolume:
    """Integer class labels, uint8 (D, H, W); values in [0, num_classes)."""
    data: np.ndarray
    spacing: tuple[float, float, float]
    num_classes: int


def _stem(path) -> Path:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p


def _read_header(stem: Path) -> dict:
    header_path = stem.with_suffix(".json")
    try:
        with open(header_path) as f:
            header = json.load(f)
    except FileNotFoundError:
        raise DataError(f"missing header file {header_path}")
    except json.JSONDecodeError as e:
        raise DataError(f"invalid JSON in {header_path}: {e}")
    for key in ("dims", "spacing_mm", "dtype"):
        if key not in header:
            raise DataError(f"{header_path}: missing required key '{key}'")
    dims = header["dims"]
    spacing = header["spacing_mm"]
    if (not isinstance(dims, list) or len(dims) != 3
            or any(not isinstance(v, int) or v <= 0 for v in dims)):
        raise DataError(f"{header_path}: dims must be 3 positive integers, got {dims!r}")
    if (not isinstance(spacing, list) or len(spacing) != 3
            or any(not isinstance(v, (int, float)) or v <= 0 for v in spacing)):
        raise DataError(f"{header_path}: spacing_mm must be 3 positive numbers, got {spacing!r}")
    if header["dtype"] not in _DTYPES:
        raise DataError(f"{header_path}: unknown dtype {header['dtype']!r}")
    return header


def _read_payload(stem: Path, header: dict) -> np.ndarray:
    raw_path = stem.with_suffix(".raw")
    dims = tuple(header["dims"])
    dtype = _DTYPES[header["dtype"]]
    try:
        buf = raw_path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing payload file {raw_path}")
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(buf) != expected:
        raise DataError(f"{raw_path}: payload is {len(buf)} bytes, header implies {expected}")
    return np.frombuffer(buf, dtype=dtype).reshape(dims).copy()


def read_volume(path) -> Volume:
    """Read an image volume (dtype f32) from `<stem>.json` + `<stem>.raw`."""
    stem = _stem(path)
    header = _read_header(stem)
    if header["dtype"] != "f32":
        raise DataError(f"{stem}.json: expected an image volume (f32), got {header['dtype']}")
    data = _read_payload(stem, header).astype(np.float32, copy=False)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{stem}.raw: payload contains non-finite values")
    return Volume(data, tuple(float(s) for s in header["spacing_mm"]),
                  header.get("modality", "CT"))


def read_labels(path) -> LabelVolume:
    """Read a label volume (dtype u8, with num_classes) from disk."""
    stem = _stem(path)
    header = _read_header(stem)
    if header["dtype"] != "u8":
        raise DataError(f"{stem}.json: expected a label volume (u8), got {header['dtype']}")
    if "num_classes" not in header:
        raise DataError(f"{stem}.json: label volume missing 'num_classes'")
    k = header["num_classes"]
    if not isinstance(k, int) or k < 2:
        raise DataError(f"{stem}.json: num_classes must be an integer >= 2, got {k!r}")
    data = _read_payload(stem, header)
    if data.max(initial=0) >= k:
        raise DataError(f"{stem}.raw: label {int(data.max())} out of range for {k} classes")
    return LabelVolume(data, tuple(float(s) for s in header["spacing_mm"]), k)


def write_volume(vol, path) -> None:
    """Write a Volume or LabelVolume as `<stem>.json` + `<stem>.raw`."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(vol, LabelVolume):
        data = np.ascontiguousarray(vol.data, dtype=np.uint8)
        header = {"dims": list(data.shape), "spacing_mm": list(vol.spacing),
                  "dtype": "u8", "modality": "LABEL", "num_classes": int(vol.num_classes)}
    elif isinstance(vol, Volume):
        data = np.ascontiguousarray(vol.data, dtype="<f4")
        header = {"dims": list(data.shape), "spacing_mm": list(vol.spacing),
                  "dtype": "f32", "modality": vol.modality}
    else:
        raise TypeError(f"write_volume: expected Volume or LabelVolume, got {type(vol)}")
    if data.ndim != 3:
        raise DataError(f"write_volume: data must be 3-D, got shape {data.shape}")
    with open(stem.with_suffix(".json"), "w") as f:
        json.dump(header, f, indent=1)
        f.write("\n")
    stem.with_suffix(".raw").write_bytes(data.tobytes())


def _zscore(x: np.ndarray) -> np.ndarray:
    """Z-score in float64; a constant input (zero variance) maps to zeros."""
    sd = float(x.std())
    if sd == 0.0:
        return np.zeros_like(x, dtype=np.float32)
    return ((x - x.mean()) / sd).astype(np.float32)


def clip_and_normalize_ct(vol: Volume, lo: float = CT_CLIP_RANGE[0],
                          hi: float = CT_CLIP_RANGE[1]) -> Volume:
    """Clamp intensities to [lo, hi], then z-score with the clamped volume's
    own mean and standard deviation (the CT preprocessing path)."""
    if not lo < hi:
        raise ValueError(f"clip window requires lo < hi, got ({lo}, {hi})")
    x = np.clip(vol.data.astype(np.float64), lo, hi)
    return Volume(_zscore(x), vol.spacing, vol.modality)


def normalize_zscore(vol: Volume) -> Volume:
    """Per-volume z-score without clamping (MR / synthetic preprocessing)."""
    return Volume(_zscore(vol.data.astype(np.float64)), vol.spacing, vol.modality)


def normalize(vol: Volume) -> Volume:
    """Modality dispatch: CT gets the fixed clip window first, everything
    else is plain z-scoring."""
    if vol.modality.upper() == "CT":
        return clip_and_normalize_ct(vol)
    return normalize_zscore(vol)


def _axis_grid(n_in: int, s_in: float, s_out: float) -> tuple[int, np.ndarray]:
    """Output length and source coordinates for one axis (pixel-center model)."""
    n_out = max(1, int(np.floor(n_in * s_in / s_out + 0.5)))
    x = (np.arange(n_out, dtype=np.float64) + 0.5) * (s_out / s_in) - 0.5
    return n_out, np.clip(x, 0.0, float(n_in - 1))


def resample_volume(vol: Volume, target_spacing) -> Volume:
    """Trilinear resampling onto `target_spacing` (mm, z-major)."""
    target_spacing = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in target_spacing):
        raise DataError(f"resample_volume: nonpositive target spacing {target_spacing}")
    grids = [_axis_grid(n, s_in, s_out)
             for n, s_in, s_out in zip(vol.data.shape, vol.spacing, target_spacing)]
    coords = [g[1] for g in grids]
    lo = [np.floor(c).astype(np.intp) for c in coords]
    hi = [np.minimum(l + 1, n - 1) for l, n in zip(lo, vol.data.shape)]
    frac = [c - l for c, l in zip(coords, lo)]
    src = vol.data.astype(np.float64)
    out = np.zeros((grids[0][0], grids[1][0], grids[2][0]), dtype=np.float64)
    for az, wz in ((lo[0], 1.0 - frac[0]), (hi[0], frac[0])):
        for ay, wy in ((lo[1], 1.0 - frac[1]), (hi[1], frac[1])):
            for ax, wx in ((lo[2], 1.0 - frac[2]), (hi[2], frac[2])):
                w = wz[:, None, None] * wy[None, :, None] * wx[None, None, :]
                out += w * src[np.ix_(az, ay, ax)]
    return Volume(out.astype(np.float32), target_spacing, vol.modality)


def resample_labels(lab: LabelVolume, target_spacing) -> LabelVolume:
    """Nearest-neighbour resampling for label volumes (same grid model)."""
    target_spacing = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in target_spacing):
        raise DataError(f"resample_labels: nonpositive target spacing {target_spacing}")
    idx = []
    for n, s_in, s_out in zip(lab.data.shape, lab.spacing, target_spacing):
        _, x = _axis_grid(n, s_in, s_out)
        idx.append(np.clip(np.floor(x + 0.5), 0, n - 1).astype(np.intp))
    out = lab.data[np.ix_(*idx)]
    return LabelVolume(np.ascontiguousarray(out), target_spacing, lab.num_classes)


def resample(vol, target_spacing):
    """Resample either kind of volume onto `target_spacing` (mm, z-major):
    trilinear for images, nearest-neighbour for labels."""
    if isinstance(vol, LabelVolume):
        return resample_labels(vol, target_spacing)
    if isinstance(vol, Volume):
        return resample_volume(vol, target_spacing)
    raise TypeError(f"resample: expected Volume or LabelVolume, got {type(vol)}")


def write_pgm(image: np.ndarray, path) -> None:
    """Write a 2-D array as binary 8-bit PGM, min-max scaled to [0, 255]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DataError(f"write_pgm: expected a 2-D image, got shape {img.shape}")
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        scaled = (img - lo) / (hi - lo) * 255.0
    else:
        scaled = np.zeros_like(img)
    buf = np.floor(scaled + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(buf.tobytes())
