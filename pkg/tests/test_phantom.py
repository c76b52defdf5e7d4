"""Synthetic ellipsoid phantoms: determinism, geometry, and failure modes."""

import numpy as np
import pytest

import banet.phantom
from banet.errors import DataError
from banet.phantom import PhantomConfig, generate_phantom


def fixed_radius_cfg(*radii, **kw):
    base = dict(num_organs=len(radii),
                radius_ranges=tuple((float(r), float(r)) for r in radii))
    base.update(kw)
    return PhantomConfig(**base)


# ---------------------------------------------------------------------------
# configuration invariants
# ---------------------------------------------------------------------------

def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        PhantomConfig(noise_sigma=-0.1)
    with pytest.raises(ValueError):
        PhantomConfig(contrast_gap=-1.0)
    with pytest.raises(ValueError):
        PhantomConfig(num_organs=2)  # three radius ranges for two organs
    with pytest.raises(ValueError):
        PhantomConfig(num_organs=1, radius_ranges=((5.0, 3.0),))
    with pytest.raises(ValueError):
        PhantomConfig(dims=(0, 32, 32))


def test_config_rejects_radii_that_cannot_fit():
    with pytest.raises(ValueError):
        fixed_radius_cfg(16, dims=(32, 32, 32))
    with pytest.raises(ValueError):
        fixed_radius_cfg(8, dims=(32, 32, 12))
    fixed_radius_cfg(8, dims=(32, 32, 32))  # fits fine


def test_config_allows_empty_scene():
    cfg = PhantomConfig(num_organs=0, radius_ranges=())
    assert cfg.num_organs == 0


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def test_deterministic_per_seed():
    vol_a, lab_a = generate_phantom(PhantomConfig(seed=5))
    vol_b, lab_b = generate_phantom(PhantomConfig(seed=5))
    vol_c, lab_c = generate_phantom(PhantomConfig(seed=6))
    assert np.array_equal(vol_a.data, vol_b.data)
    assert np.array_equal(lab_a.data, lab_b.data)
    assert not np.array_equal(vol_a.data, vol_c.data)
    assert not np.array_equal(lab_a.data, lab_c.data)


def test_shapes_dtypes_and_metadata():
    cfg = PhantomConfig(dims=(16, 20, 24), num_organs=1,
                        radius_ranges=((3.0, 4.0),), spacing=(2.0, 1.0, 1.0))
    vol, lab = generate_phantom(cfg)
    assert vol.data.shape == lab.data.shape == (16, 20, 24)
    assert vol.data.dtype == np.float32 and lab.data.dtype == np.uint8
    assert vol.spacing == lab.spacing == (2.0, 1.0, 1.0)
    assert lab.num_classes == 2


def test_empty_scene_is_pure_noise():
    cfg = PhantomConfig(num_organs=0, radius_ranges=(), seed=1)
    vol, lab = generate_phantom(cfg)
    assert not lab.data.any()
    assert lab.num_classes == 1
    assert np.ptp(vol.data) > 0  # noise, not a constant
    assert abs(float(vol.data.std()) - cfg.noise_sigma) < 0.02


def test_noiseless_image_is_piecewise_constant():
    cfg = fixed_radius_cfg(6, 3, contrast_gap=1.0, noise_sigma=0.0, seed=2)
    vol, lab = generate_phantom(cfg)
    assert np.array_equal(vol.data, lab.data.astype(np.float32))
    assert set(np.unique(vol.data)) <= {0.0, 1.0, 2.0}
    assert np.array_equal(vol.data != 0, lab.data != 0)


def test_every_organ_present():
    for seed in range(8):
        _, lab = generate_phantom(PhantomConfig(seed=seed))
        present = set(np.unique(lab.data).tolist())
        assert {1, 2, 3} <= present


def test_size_imbalance_with_fixed_radii():
    _, lab = generate_phantom(fixed_radius_cfg(10, 5, 2, seed=0))
    counts = [int((lab.data == k).sum()) for k in (1, 2, 3)]
    assert counts[0] > counts[1] > counts[2] > 0
    assert counts[0] / counts[2] > 20


def test_default_config_keeps_size_imbalance():
    _, lab = generate_phantom(PhantomConfig(seed=0))
    counts = [int((lab.data == k).sum()) for k in (1, 2, 3)]
    assert counts[0] > 20 * counts[2]


def test_organ_intensities_follow_contrast_gap():
    cfg = fixed_radius_cfg(8, 4, contrast_gap=0.5, noise_sigma=0.01, seed=3)
    vol, lab = generate_phantom(cfg)
    for k in (1, 2):
        inside = vol.data[lab.data == k]
        assert abs(float(inside.mean()) - 0.5 * k) < 0.01


def test_later_organs_overwrite_earlier():
    # two concentric-ish large organs: the second one owns the overlap
    cfg = fixed_radius_cfg(9, 9, dims=(24, 24, 24), noise_sigma=0.0,
                           contrast_gap=1.0, seed=4)
    _, lab = generate_phantom(cfg)
    counts = [int((lab.data == k).sum()) for k in (1, 2)]
    assert counts[1] > 0
    # organ 2 keeps its full analytic ellipsoid volume; organ 1 lost the overlap
    assert counts[1] > 2000  # radius-9 ball has ~3000 voxels


def test_retry_exhaustion_raises(monkeypatch):
    calls = {"n": 0}

    def never_places(rng, cfg):
        calls["n"] += 1
        return np.zeros(cfg.dims, dtype=np.uint8)

    monkeypatch.setattr(banet.phantom, "_draw_organs", never_places)
    with pytest.raises(DataError, match="seed"):
        generate_phantom(PhantomConfig(seed=9))
    assert calls["n"] == 20
