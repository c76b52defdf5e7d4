"""Sliding-window prediction, checkpoint ensembling, and Dice evaluation."""

import numpy as np
import pytest

from banet.autodiff import Tensor
from banet.errors import DataError
from banet.inference import (DiceReport, Prediction, dice_score, ensemble,
                             prediction_to_labels, resample_prediction,
                             sliding_window_predict, write_dice_csv)
from banet.network import NetworkConfig, build, forward_infer
from banet.volume import LabelVolume, Volume


PATCH = (8, 8, 8)


@pytest.fixture(scope="module")
def net():
    cfg = NetworkConfig(levels=2, base_channels=2, num_classes=2, patch_dims=PATCH)
    return build(cfg, seed=0)


def make_volume(data):
    return Volume(np.ascontiguousarray(data, dtype=np.float32), (1.0, 1.0, 1.0))


def infer_probs(net, arr):
    x = Tensor(np.ascontiguousarray(arr[None, None], dtype=np.float32))
    return forward_infer(net, x).data[0]


def flat_prediction(probs_per_class, shape=(2, 2, 2)):
    probs = np.stack([np.full(shape, p, dtype=np.float32) for p in probs_per_class])
    return Prediction(probs, np.argmax(probs, axis=0).astype(np.uint8),
                      (1.0, 1.0, 1.0))


# ---------------------------------------------------------------------------
# sliding window
# ---------------------------------------------------------------------------

def test_single_window_equals_forward_pass(net):
    rng = np.random.default_rng(0)
    arr = rng.standard_normal(PATCH).astype(np.float32)
    pred = sliding_window_predict(net, make_volume(arr), PATCH)
    assert np.array_equal(pred.probs, infer_probs(net, arr))
    assert np.array_equal(pred.labels, np.argmax(pred.probs, axis=0))
    assert pred.num_classes == 2


def test_small_volume_padded_then_cropped(net):
    rng = np.random.default_rng(1)
    arr = rng.standard_normal((6, 8, 5)).astype(np.float32)
    pred = sliding_window_predict(net, make_volume(arr), PATCH)
    assert pred.probs.shape == (2, 6, 8, 5)
    padded = np.zeros(PATCH, dtype=np.float32)
    padded[:6, :, :5] = arr
    assert np.array_equal(pred.probs, infer_probs(net, padded)[:, :6, :, :5])


def test_constant_volume_prediction_is_window_periodic(net):
    # identical windows see identical data, so an overlap-0 tiling of a
    # constant volume repeats one window's output verbatim
    arr = np.full((16, 8, 8), 0.3, dtype=np.float32)
    pred = sliding_window_predict(net, make_volume(arr), PATCH, overlap=0.0)
    assert np.array_equal(pred.probs[:, :8], pred.probs[:, 8:])
    window = infer_probs(net, arr[:8])
    np.testing.assert_allclose(pred.probs[:, :8], window, atol=1e-7)


def test_half_overlap_matches_hand_average_of_two_windows(net):
    rng = np.random.default_rng(2)
    arr = rng.standard_normal((12, 8, 8)).astype(np.float32)
    pred = sliding_window_predict(net, make_volume(arr), PATCH, overlap=0.5)

    # stride = 8 * 0.5 = 4, so windows start at z = 0 and z = 4
    acc = np.zeros((2, 12, 8, 8), dtype=np.float64)
    count = np.zeros((12, 8, 8), dtype=np.float64)
    for z in (0, 4):
        acc[:, z:z + 8] += infer_probs(net, arr[z:z + 8])
        count[z:z + 8] += 1.0
    acc /= count
    acc /= acc.sum(axis=0)
    np.testing.assert_allclose(pred.probs, acc.astype(np.float32), atol=1e-6)
    np.testing.assert_allclose(pred.probs.sum(axis=0), 1.0, atol=1e-4)


def test_overlap_validation(net):
    vol = make_volume(np.zeros(PATCH, dtype=np.float32))
    with pytest.raises(ValueError):
        sliding_window_predict(net, vol, PATCH, overlap=1.0)
    with pytest.raises(ValueError):
        sliding_window_predict(net, vol, PATCH, overlap=-0.1)


# ---------------------------------------------------------------------------
# ensembling
# ---------------------------------------------------------------------------

def test_ensemble_singleton_is_identity():
    p = flat_prediction([0.7, 0.3])
    out = ensemble([p])
    assert np.array_equal(out.probs, p.probs)
    assert np.array_equal(out.labels, p.labels)


def test_ensemble_identical_members_is_idempotent(net):
    rng = np.random.default_rng(3)
    vol = make_volume(rng.standard_normal(PATCH).astype(np.float32))
    a = sliding_window_predict(net, vol, PATCH)
    b = sliding_window_predict(net, vol, PATCH)
    out = ensemble([a, b])
    assert np.array_equal(out.probs, a.probs)
    assert np.array_equal(out.labels, a.labels)


def test_ensemble_mean_and_argmax():
    out = ensemble([flat_prediction([0.6, 0.4]), flat_prediction([0.2, 0.8])])
    np.testing.assert_allclose(out.probs[0], 0.4, atol=1e-6)
    np.testing.assert_allclose(out.probs[1], 0.6, atol=1e-6)
    assert (out.labels == 1).all()


def test_ensemble_permutation_invariant():
    rng = np.random.default_rng(4)
    members = []
    for _ in range(3):
        raw = rng.uniform(0.1, 1.0, (2, 2, 2, 2)).astype(np.float32)
        members.append(Prediction(raw / raw.sum(axis=0),
                                  np.zeros((2, 2, 2), dtype=np.uint8),
                                  (1.0, 1.0, 1.0)))
    fwd = ensemble(members)
    rev = ensemble(members[::-1])
    assert np.array_equal(fwd.probs, rev.probs)
    assert np.array_equal(fwd.labels, rev.labels)


def test_ensemble_tie_takes_lowest_class():
    out = ensemble([flat_prediction([0.3, 0.7]), flat_prediction([0.7, 0.3])])
    assert (out.labels == 0).all()


def test_ensemble_input_validation():
    with pytest.raises(ValueError):
        ensemble([])
    a = flat_prediction([0.5, 0.5])
    b = flat_prediction([0.5, 0.5], shape=(2, 2, 3))
    with pytest.raises(DataError):
        ensemble([a, b])
    c = flat_prediction([0.5, 0.5])
    c.spacing = (2.0, 1.0, 1.0)
    with pytest.raises(DataError):
        ensemble([a, c])


# ---------------------------------------------------------------------------
# resampled predictions
# ---------------------------------------------------------------------------

def test_resample_prediction_identity(net):
    rng = np.random.default_rng(5)
    vol = make_volume(rng.standard_normal(PATCH).astype(np.float32))
    pred = sliding_window_predict(net, vol, PATCH)
    again = resample_prediction(pred, (1.0, 1.0, 1.0))
    np.testing.assert_allclose(again.probs, pred.probs, atol=1e-6)
    assert np.array_equal(again.labels, pred.labels)


def test_resample_prediction_coarser_grid(net):
    rng = np.random.default_rng(6)
    vol = make_volume(rng.standard_normal(PATCH).astype(np.float32))
    pred = sliding_window_predict(net, vol, PATCH)
    coarse = resample_prediction(pred, (2.0, 2.0, 2.0))
    assert coarse.probs.shape == (2, 4, 4, 4)
    assert coarse.spacing == (2.0, 2.0, 2.0)
    np.testing.assert_allclose(coarse.probs.sum(axis=0), 1.0, atol=1e-4)
    assert np.array_equal(coarse.labels, np.argmax(coarse.probs, axis=0))


# ---------------------------------------------------------------------------
# Dice
# ---------------------------------------------------------------------------

def lv(arr, num_classes):
    return LabelVolume(np.asarray(arr, dtype=np.uint8), (1.0, 1.0, 1.0), num_classes)


def test_dice_perfect_match():
    rng = np.random.default_rng(7)
    arr = rng.integers(0, 4, (5, 5, 5))
    rep = dice_score(lv(arr, 4), lv(arr, 4), 4)
    assert rep.per_class == [1.0, 1.0, 1.0]
    assert rep.mean == 1.0


def test_dice_half_overlap_by_hand():
    pred = np.zeros((4, 4, 4), dtype=np.uint8)
    gt = np.zeros((4, 4, 4), dtype=np.uint8)
    pred[0, 0, 0] = pred[0, 0, 1] = 1
    gt[0, 0, 1] = gt[0, 0, 2] = 1
    rep = dice_score(lv(pred, 2), lv(gt, 2), 2)
    assert rep.per_class == [0.5]
    assert rep.mean == 0.5


def test_dice_empty_conventions():
    empty = np.zeros((3, 3, 3), dtype=np.uint8)
    one = empty.copy()
    one[1, 1, 1] = 1
    assert dice_score(lv(empty, 2), lv(empty, 2), 2).per_class == [1.0]
    assert dice_score(lv(one, 2), lv(empty, 2), 2).per_class == [0.0]
    assert dice_score(lv(empty, 2), lv(one, 2), 2).per_class == [0.0]


def test_dice_symmetric():
    rng = np.random.default_rng(8)
    a = rng.integers(0, 3, (6, 6, 6))
    b = rng.integers(0, 3, (6, 6, 6))
    ra = dice_score(lv(a, 3), lv(b, 3), 3)
    rb = dice_score(lv(b, 3), lv(a, 3), 3)
    assert ra.per_class == rb.per_class and ra.mean == rb.mean


def test_dice_matches_counting_oracle():
    rng = np.random.default_rng(9)
    for _ in range(10):
        a = rng.integers(0, 4, (6, 6, 6))
        b = rng.integers(0, 4, (6, 6, 6))
        rep = dice_score(lv(a, 4), lv(b, 4), 4)
        for c in range(1, 4):
            pa = set(np.flatnonzero(a == c).tolist())
            ga = set(np.flatnonzero(b == c).tolist())
            if not pa and not ga:
                want = 1.0
            else:
                want = 2.0 * len(pa & ga) / (len(pa) + len(ga))
            assert rep.per_class[c - 1] == want
        assert rep.mean == float(np.mean(rep.per_class))


def test_dice_shape_mismatch():
    with pytest.raises(DataError):
        dice_score(lv(np.zeros((3, 3, 3)), 2), lv(np.zeros((3, 3, 4)), 2), 2)


def test_dice_accepts_bare_arrays():
    arr = np.zeros((3, 3, 3), dtype=np.uint8)
    arr[0, 0, 0] = 1
    rep = dice_score(arr, arr.copy(), 2)
    assert rep.per_class == [1.0]


# ---------------------------------------------------------------------------
# report plumbing
# ---------------------------------------------------------------------------

def test_prediction_to_labels():
    p = flat_prediction([0.2, 0.8])
    out = prediction_to_labels(p)
    assert isinstance(out, LabelVolume)
    assert np.array_equal(out.data, p.labels)
    assert out.num_classes == 2 and out.spacing == p.spacing


def test_write_dice_csv(tmp_path):
    path = tmp_path / "dice.csv"
    write_dice_csv(DiceReport([0.5, 1.0], 0.75), path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "class,dice"
    assert lines[1].split(",") == ["1", repr(0.5)]
    assert lines[2].split(",") == ["2", repr(1.0)]
    assert lines[3].split(",") == ["mean", repr(0.75)]
