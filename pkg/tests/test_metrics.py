import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ciml.config import RegionId, TaskAssignment, brats_assignment, region_member
from ciml.metrics import (RegionReport, average_region_probs, dice_score, ensemble_regions, evaluate_case,
                          hausdorff, hd95, mean_dice, write_reports_csv)
from oracles import dice_by_counting, grid_masks, hausdorff_by_pairs

masks_2d = arrays(bool, (5, 6))


def test_dice_examples():
    a = np.array([1, 1, 0, 0], bool)
    b = np.array([1, 0, 1, 0], bool)
    assert dice_score(a, b) == 0.5
    assert dice_score(a, a) == 1.0
    assert dice_score(np.zeros(4, bool), np.zeros(4, bool)) == 1.0
    assert dice_score(a, ~a) == 0.0
    with pytest.raises(ValueError):
        dice_score(a, np.zeros(5, bool))


def test_hd95_examples():
    a = np.zeros((7, 7), bool)
    b = np.zeros((7, 7), bool)
    a[1, 1] = True
    b[1, 4] = True
    assert hd95(a, b) == 3.0
    assert hd95(a, a) == 0.0
    assert hd95(a, np.zeros_like(a)) is None
    assert hd95(np.zeros_like(a), np.zeros_like(a)) is None


def test_brute_force_equivalence_on_small_grid():
    masks = list(grid_masks())
    assert len(masks) == 256
    for a in masks:
        for b in masks:
            assert dice_score(a, b) == dice_by_counting(a, b)
            if a.any() and b.any():
                assert hausdorff(a, b) == pytest.approx(hausdorff_by_pairs(a, b), abs=1e-12)


@given(masks_2d, masks_2d)
def test_dice_symmetric_and_permutation_invariant(a, b):
    assert dice_score(a, b) == dice_score(b, a)
    perm = np.random.default_rng(0).permutation(a.size)
    assert dice_score(a.ravel()[perm], b.ravel()[perm]) == pytest.approx(dice_score(a, b))
    assert 0.0 <= dice_score(a, b) <= 1.0


@given(masks_2d, masks_2d, st.floats(0.25, 4.0))
def test_hd95_symmetric_and_scales_with_spacing(a, b, s):
    d = hd95(a, b)
    assert d == hd95(b, a)
    if d is not None:
        assert d >= 0
        assert hd95(a, b, (s, s)) == pytest.approx(s * d, rel=1e-9, abs=1e-12)


def test_hd95_is_not_above_max_hausdorff():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = rng.random((8, 8, 8)) < 0.2, rng.random((8, 8, 8)) < 0.2
        assert hd95(a, b) <= hausdorff(a, b) + 1e-12


def one_region():
    return TaskAssignment.from_names(["A", "B"], {"R": 1}, {"A": ["R"], "B": ["R"]})


def test_single_owner_ensemble_equals_segmentor():
    a = TaskAssignment.from_names(["A"], {"R": 1}, {"A": ["R"]})
    fg = np.array([0.1, 0.6, 0.9, 0.4])
    probs = {"A": np.stack([1 - fg, fg])}
    assert np.array_equal(ensemble_regions(probs, a), (fg > 0.5).astype(int))


def test_two_segmentors_average():
    probs = {"A": np.array([[0.8], [0.2]]), "B": np.array([[0.2], [0.8]])}
    avg = average_region_probs(probs, one_region())
    assert avg[RegionId("R", 1)] == pytest.approx([0.5])


def test_channel_count_checked():
    with pytest.raises(ValueError):
        average_region_probs({"A": np.ones((3, 2)), "B": np.ones((2, 2))}, one_region())


def test_nested_toy_volume_brute_force():
    a = brats_assignment()
    rng = np.random.default_rng(0)
    probs = {}
    for m in a.modalities:
        raw = rng.random((len(a.targets(m)) + 1, 4, 4, 4))
        probs[m.name] = raw / raw.sum(axis=0)
    labels = ensemble_regions(probs, a)
    avg = average_region_probs(probs, a)
    regions = a.regions
    for idx in np.ndindex(4, 4, 4):
        want = 0
        for r in regions:  # outermost first; stop at the first region not entered
            if avg[r][idx] > 0.5:
                want = r.class_index
            else:
                break
        assert labels[idx] == want
    for outer, inner in zip(regions, regions[1:]):
        assert np.all(region_member(labels, outer)[region_member(labels, inner)])


def test_non_nested_argmax_against_background():
    a = TaskAssignment.from_names(["A", "B"], {"X": 1, "Y": 2}, {"A": ["X"], "B": ["Y"]}, nested=False)
    probs = {"A": np.array([[0.7, 0.3, 0.55], [0.3, 0.7, 0.45]]),
             "B": np.array([[0.9, 0.6, 0.4], [0.1, 0.4, 0.6]])}
    # voxel 0: X .3, Y .1, bg .6; voxel 1: X .7 beats bg; voxel 2: Y .6 > X .45
    assert ensemble_regions(probs, a).tolist() == [0, 1, 2]


def test_ensemble_idempotent_on_identical_outputs():
    a = brats_assignment()
    rng = np.random.default_rng(2)
    truth = rng.integers(0, 4, size=(5, 5, 5))
    probs = {}
    for m in a.modalities:
        local = np.zeros(truth.shape, int)
        for i, t in enumerate(a.targets(m), start=1):
            local[region_member(truth, t)] = i
        probs[m.name] = np.moveaxis(np.eye(len(a.targets(m)) + 1)[local], -1, 0)
    assert np.array_equal(ensemble_regions(probs, a), truth)


def test_reports_and_csv(tmp_path):
    a = brats_assignment()
    true = np.zeros((6, 6, 6), int)
    true[1:5, 1:5, 1:5] = 1
    true[2:4, 2:4, 2:4] = 2
    pred = true.copy()
    reports = evaluate_case("c0", pred, true, a.regions)
    assert [r.dice for r in reports] == [1.0, 1.0, 1.0]
    assert reports[2].hd95 is None and reports[0].hd95 == 0.0
    assert mean_dice(reports) == 1.0
    path = tmp_path / "r.csv"
    write_reports_csv(path, reports + [RegionReport("c1", a.regions[0], 0.5, 2.0)])
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["case_id", "region", "dice", "hd95"]
    assert ["c0", "ET", "1.000000", "undefined"] in rows
    assert ["MEAN", "WT", "0.750000", "1.000000"] in rows
    assert ["MEAN", "ET", "1.000000", "undefined"] in rows
    assert rows[-1][:2] == ["MEAN", "MEAN"]
