"""Boundary extraction, label pyramids, loss values, and loss gradients."""

import numpy as np
import pytest
from scipy import ndimage

from banet.autodiff import Tape, Tensor, backward
from banet.supervision import (SupervisionTargets, boundary_mask, build_targets,
                               deep_supervision_weights, dice_ce_loss,
                               downsample_labels, extract_boundary, label_pyramid,
                               one_hot, one_hot_array, total_loss)
from banet.volume import LabelVolume


def brute_boundary(labels):
    """Literal transcription of the rule: a voxel is boundary iff it is
    foreground and some face neighbour (or the outside) has another label."""
    d, h, w = labels.shape
    out = np.zeros_like(labels, dtype=np.uint8)
    for z in range(d):
        for y in range(h):
            for x in range(w):
                if labels[z, y, x] == 0:
                    continue
                for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                   (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    nz, ny, nx = z + dz, y + dy, x + dx
                    if not (0 <= nz < d and 0 <= ny < h and 0 <= nx < w):
                        out[z, y, x] = 1
                        break
                    if labels[nz, ny, nx] != labels[z, y, x]:
                        out[z, y, x] = 1
                        break
    return out


def rand_labels(rng, shape, num_classes):
    return rng.integers(0, num_classes, shape).astype(np.uint8)


# ---------------------------------------------------------------------------
# boundary extraction
# ---------------------------------------------------------------------------

def test_boundary_all_background_is_empty():
    assert not boundary_mask(np.zeros((4, 4, 4), dtype=np.uint8)).any()


def test_boundary_single_voxel():
    lab = np.zeros((5, 5, 5), dtype=np.uint8)
    lab[2, 2, 2] = 1
    mask = boundary_mask(lab)
    assert mask.sum() == 1 and mask[2, 2, 2] == 1


def test_boundary_of_solid_cube_is_its_shell():
    lab = np.zeros((5, 5, 5), dtype=np.uint8)
    lab[1:4, 1:4, 1:4] = 1
    mask = boundary_mask(lab)
    assert mask.sum() == 26           # 27-voxel cube minus its single interior voxel
    assert mask[2, 2, 2] == 0


def test_boundary_checkerboard_is_all_foreground():
    z, y, x = np.indices((4, 4, 4))
    lab = ((z + y + x) % 2).astype(np.uint8)
    assert np.array_equal(boundary_mask(lab), lab)


def test_boundary_between_touching_organs():
    lab = np.zeros((4, 4, 4), dtype=np.uint8)
    lab[:, :, :2] = 1
    lab[:, :, 2:] = 2
    mask = boundary_mask(lab)
    # every voxel touches either the other organ or the outside
    assert mask.all()


def test_boundary_matches_erosion_of_foreground_single_class():
    rng = np.random.default_rng(0)
    structure = ndimage.generate_binary_structure(3, 1)
    for _ in range(20):
        lab = rand_labels(rng, (8, 8, 8), 2)
        fg = lab != 0
        want = fg & ~ndimage.binary_erosion(fg, structure, border_value=0)
        assert np.array_equal(boundary_mask(lab).astype(bool), want)


def test_boundary_matches_brute_force_multiclass():
    rng = np.random.default_rng(1)
    for _ in range(10):
        lab = rand_labels(rng, (6, 6, 6), 4)
        assert np.array_equal(boundary_mask(lab), brute_boundary(lab))


def test_boundary_supports_leading_axes():
    rng = np.random.default_rng(2)
    lab = rand_labels(rng, (2, 6, 6, 6), 3)
    batched = boundary_mask(lab)
    assert batched.shape == lab.shape
    for n in range(2):
        assert np.array_equal(batched[n], boundary_mask(lab[n]))


def test_extract_boundary_wraps_as_binary_labels():
    rng = np.random.default_rng(3)
    lab = LabelVolume(rand_labels(rng, (6, 6, 6), 3), (1.0, 2.0, 3.0), 3)
    bnd = extract_boundary(lab)
    assert bnd.num_classes == 2
    assert bnd.spacing == lab.spacing
    assert np.array_equal(bnd.data, boundary_mask(lab.data))


# ---------------------------------------------------------------------------
# pyramids
# ---------------------------------------------------------------------------

def test_downsample_keeps_even_indices():
    lab = np.arange(64, dtype=np.uint8).reshape(4, 4, 4)
    assert np.array_equal(downsample_labels(lab, 0), lab)
    assert np.array_equal(downsample_labels(lab, 1), lab[::2, ::2, ::2])
    assert np.array_equal(downsample_labels(lab, 2), lab[::4, ::4, ::4])


def test_label_pyramid_single_scale_is_identity():
    rng = np.random.default_rng(4)
    lab = LabelVolume(rand_labels(rng, (8, 8, 8), 3), (1.0, 1.0, 1.0), 3)
    pyr = label_pyramid(lab, 1)
    assert len(pyr) == 1
    assert np.array_equal(pyr[0].data, lab.data)


def test_label_pyramid_shapes_spacing_and_constancy():
    lab = LabelVolume(np.full((8, 8, 8), 2, dtype=np.uint8), (1.0, 1.0, 1.0), 3)
    pyr = label_pyramid(lab, 3)
    assert [p.data.shape for p in pyr] == [(8, 8, 8), (4, 4, 4), (2, 2, 2)]
    assert [p.spacing for p in pyr] == [(1.0,) * 3, (2.0,) * 3, (4.0,) * 3]
    assert all((p.data == 2).all() for p in pyr)


def test_label_pyramid_requires_divisible_dims():
    lab = LabelVolume(np.zeros((6, 8, 8), dtype=np.uint8), (1.0, 1.0, 1.0), 2)
    with pytest.raises(ValueError):
        label_pyramid(lab, 3)  # 6 is not divisible by 4


def test_one_hot_round_trip():
    rng = np.random.default_rng(5)
    lab = rand_labels(rng, (1, 4, 4, 4), 3)
    oh = one_hot_array(lab, 3)
    assert oh.shape == (1, 3, 4, 4, 4)
    assert np.array_equal(oh.sum(axis=1), np.ones((1, 4, 4, 4), dtype=np.float32))
    assert np.array_equal(oh.argmax(axis=1), lab)


def test_one_hot_all_background():
    oh = one_hot_array(np.zeros((1, 2, 2, 2), dtype=np.uint8), 2)
    assert np.array_equal(oh[:, 0], np.ones((1, 2, 2, 2), dtype=np.float32))
    assert not oh[:, 1].any()


def test_one_hot_range_check():
    with pytest.raises(ValueError):
        one_hot_array(np.full((1, 2, 2, 2), 3, dtype=np.uint8), 3)


def test_one_hot_volume_wrapper():
    rng = np.random.default_rng(6)
    lab = LabelVolume(rand_labels(rng, (4, 4, 4), 2), (1.0, 1.0, 1.0), 2)
    t = one_hot(lab)
    assert isinstance(t, Tensor)
    assert t.shape == (1, 2, 4, 4, 4)
    assert np.array_equal(t.data, one_hot_array(lab.data[None], 2))


# ---------------------------------------------------------------------------
# supervision weights
# ---------------------------------------------------------------------------

def test_weights_five_levels_exact():
    assert deep_supervision_weights(5) == [8 / 15, 4 / 15, 2 / 15, 1 / 15]


def test_weights_two_levels():
    assert deep_supervision_weights(2) == [1.0]


def test_weights_normalized_and_decreasing():
    for levels in range(2, 9):
        w = deep_supervision_weights(levels)
        assert len(w) == levels - 1
        assert abs(sum(w) - 1.0) <= 1e-9
        assert all(a > b for a, b in zip(w, w[1:]))
        assert all(x > 0 for x in w)


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------

def test_build_targets_downsamples_before_extracting_boundary():
    rng = np.random.default_rng(7)
    labels = rand_labels(rng, (1, 8, 8, 8), 3)
    t = build_targets(labels, num_classes=3, levels=3)
    assert len(t.seg_onehot) == len(t.boundary_onehot) == 2
    assert t.omega == deep_supervision_weights(3)
    for s in range(2):
        coarse = downsample_labels(labels, s)
        assert np.array_equal(t.seg_onehot[s].data, one_hot_array(coarse, 3))
        assert np.array_equal(t.boundary_onehot[s].data,
                              one_hot_array(boundary_mask(coarse), 2))


def test_targets_validation():
    oh = Tensor(np.ones((1, 2, 2, 2, 2), dtype=np.float32) * 0.5)
    with pytest.raises(ValueError):
        SupervisionTargets([oh, oh], [oh], [0.5, 0.5])
    with pytest.raises(ValueError):
        SupervisionTargets([oh], [oh], [0.5])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def test_perfect_prediction_loss_is_tiny():
    rng = np.random.default_rng(8)
    labels = rand_labels(rng, (1, 4, 4, 4), 3)
    target = Tensor(one_hot_array(labels, 3))
    assert dice_ce_loss(target, target).item() < 1e-4


def test_uniform_prediction_on_half_foreground():
    labels = np.zeros((1, 4, 4, 4), dtype=np.uint8)
    labels[:, :2] = 1
    target = Tensor(one_hot_array(labels, 2))
    probs = Tensor(np.full((1, 2, 4, 4, 4), 0.5, dtype=np.float32))
    got = dice_ce_loss(probs, target).item()
    assert got == pytest.approx(0.5 + np.log(2.0), abs=1e-5)


def test_dice_ce_gradients_match_fd():
    rng = np.random.default_rng(9)
    labels = rng.integers(0, 3, (1, 2, 2, 2))
    target = Tensor(one_hot_array(labels, 3, dtype=np.float64))
    p = Tensor(rng.uniform(0.1, 0.9, (1, 3, 2, 2, 2)), requires_grad=True)
    with Tape():
        backward(dice_ce_loss(p, target))
    flat = p.data.reshape(-1)
    fd = np.zeros_like(flat)
    step = 1e-6
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = dice_ce_loss(p, target).item()
        flat[i] = orig - step
        dn = dice_ce_loss(p, target).item()
        flat[i] = orig
        fd[i] = (up - dn) / (2 * step)
    np.testing.assert_allclose(p.grad, fd.reshape(p.shape), rtol=1e-3, atol=1e-8)


def test_loss_increases_as_prediction_degrades():
    rng = np.random.default_rng(10)
    labels = rand_labels(rng, (1, 4, 4, 4), 2)
    target = Tensor(one_hot_array(labels, 2))
    uniform = np.full(target.shape, 0.5, dtype=np.float32)
    losses = []
    for alpha in (0.0, 0.25, 0.5, 0.75, 1.0):
        blend = Tensor((1 - alpha) * target.data + alpha * uniform)
        losses.append(dice_ce_loss(blend, target).item())
    assert all(a < b for a, b in zip(losses, losses[1:]))


def test_total_loss_perfect_everywhere():
    rng = np.random.default_rng(11)
    labels = rand_labels(rng, (1, 8, 8, 8), 3)
    t = build_targets(labels, num_classes=3, levels=3)
    seg = [Tensor(x.data.copy()) for x in t.seg_onehot]
    bnd = [Tensor(x.data.copy()) for x in t.boundary_onehot]
    assert total_loss(seg, bnd, t).item() < 1e-3


def test_total_loss_weights_the_scales():
    rng = np.random.default_rng(12)
    labels = rand_labels(rng, (1, 8, 8, 8), 2)
    t = build_targets(labels, num_classes=2, levels=3)
    seg = [Tensor(np.full(x.shape, 0.5, dtype=np.float32)) for x in t.seg_onehot]
    want = sum(w * dice_ce_loss(seg[s], t.seg_onehot[s]).item()
               for s, w in enumerate(t.omega))
    assert total_loss(seg, [], t).item() == pytest.approx(want, rel=1e-6)


def test_total_loss_scale_count_mismatch():
    rng = np.random.default_rng(13)
    labels = rand_labels(rng, (1, 8, 8, 8), 2)
    t = build_targets(labels, num_classes=2, levels=3)
    seg = [Tensor(x.data.copy()) for x in t.seg_onehot]
    with pytest.raises(ValueError):
        total_loss(seg[:1], [], t)
    with pytest.raises(ValueError):
        total_loss(seg, [Tensor(x.data.copy()) for x in t.boundary_onehot[:1]], t)
