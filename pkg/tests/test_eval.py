"""Confusion matrices, IoU, restricted argmax, and snapshot evaluation."""

import numpy as np
import pytest

import oracle
from cilseg.evaluation import (ConfusionMatrix, IoUReport, METRIC_COLUMNS,
                               confusion_for_subset, evaluate_snapshot,
                               metric_subsets, miou, per_class_iou, predict,
                               restricted_argmax)
from cilseg.losses import IGNORE
from cilseg.model import NetConfig, build, extend_for_model_based_stage


def test_confusion_hand_case_seven_twelfths():
    # class 0: tp 2, fp 1, fn 1 -> 2/4; class 1: tp 2, fp 1, fn 0 -> 2/3
    truth = np.array([[0, 0, 0], [0, 1, 1]])
    pred = np.array([[0, 0, 1], [2, 1, 1]])
    cm = ConfusionMatrix((0, 1, 2)).accumulate(truth, pred)
    ious = per_class_iou(cm)
    assert ious[0] == pytest.approx(0.5)
    assert ious[1] == pytest.approx(2 / 3)
    # class 2 appears only as a false prediction: union 1, iou 0
    assert ious[2] == 0.0
    assert miou(cm, (0, 1)) == pytest.approx(7 / 12)


def test_confusion_skips_ignore_and_out_of_set():
    truth = np.array([[0, IGNORE], [9, 1]])
    pred = np.array([[0, 0], [0, 1]])
    cm = ConfusionMatrix((0, 1)).accumulate(truth, pred)
    assert cm.total() == 2
    assert miou(cm) == 1.0


def test_confusion_merge_equals_joint_accumulation():
    rng = np.random.default_rng(7)
    t1, p1 = rng.integers(0, 4, (2, 8, 8))
    t2, p2 = rng.integers(0, 4, (2, 8, 8))
    a = ConfusionMatrix(range(4)).accumulate(t1, p1).accumulate(t2, p2)
    b = ConfusionMatrix(range(4)).accumulate(t1, p1)
    b.merge(ConfusionMatrix(range(4)).accumulate(t2, p2))
    np.testing.assert_array_equal(a.counts, b.counts)


def test_confusion_rejects_mismatched_inputs():
    with pytest.raises(ValueError):
        ConfusionMatrix((0, 1)).accumulate(np.zeros((2, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        ConfusionMatrix((0, 1)).merge(ConfusionMatrix((0, 2)))


def test_absent_class_is_excluded_not_zero():
    truth = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 0], [1, 1]])
    cm = ConfusionMatrix((0, 1, 5)).accumulate(truth, pred)
    assert per_class_iou(cm)[5] is None
    assert miou(cm) == 1.0  # the absent class does not drag the mean to 2/3
    assert miou(cm, (5,)) is None


def test_miou_matches_bruteforce_oracle():
    rng = np.random.default_rng(19)
    for _ in range(10):
        truth = rng.integers(0, 5, (10, 10))
        truth[rng.random((10, 10)) < 0.2] = IGNORE
        pred = rng.integers(0, 5, (10, 10))
        classes = (0, 1, 2, 3)  # class 4 deliberately out of set
        got = miou(ConfusionMatrix(classes).accumulate(truth, pred), classes)
        want = oracle.miou(truth, pred, classes)
        if want is None:
            assert got is None
        else:
            assert got == pytest.approx(want, rel=1e-12)


def test_miou_order_independent():
    rng = np.random.default_rng(23)
    truth = rng.integers(0, 4, (12, 12))
    pred = rng.integers(0, 4, (12, 12))
    perm = rng.permutation(144)
    a = miou(ConfusionMatrix(range(4)).accumulate(truth, pred))
    b = miou(ConfusionMatrix(range(4)).accumulate(
        truth.ravel()[perm].reshape(12, 12), pred.ravel()[perm].reshape(12, 12)))
    assert a == pytest.approx(b, rel=1e-12)


def test_restricted_argmax_basics():
    logits = np.zeros((4, 1, 2))
    logits[:, 0, 0] = [0.1, 0.9, 0.5, 0.3]
    logits[:, 0, 1] = [2.0, 1.0, 3.0, 3.0]  # tie between channels 2 and 3
    full = restricted_argmax(logits, (10, 11, 12, 13), (10, 11, 12, 13))
    np.testing.assert_array_equal(full, [[11, 12]])
    part = restricted_argmax(logits, (10, 11, 12, 13), (10, 13))
    np.testing.assert_array_equal(part, [[13, 13]])
    with pytest.raises(ValueError):
        restricted_argmax(logits, (10, 11, 12, 13), (99,))


def test_restricted_argmax_shift_invariant():
    rng = np.random.default_rng(29)
    logits = rng.standard_normal((5, 6, 6))
    shifted = logits + rng.standard_normal((1, 6, 6))
    a = restricted_argmax(logits, range(5), (1, 2, 3))
    b = restricted_argmax(shifted, range(5), (1, 2, 3))
    np.testing.assert_array_equal(a, b)


def test_restriction_consistency():
    # a pixel whose full-set winner is inside the subset keeps that winner
    rng = np.random.default_rng(31)
    logits = rng.standard_normal((6, 8, 8))
    full = restricted_argmax(logits, range(6), range(6))
    sub = restricted_argmax(logits, range(6), (0, 1, 2))
    inside = np.isin(full, (0, 1, 2))
    np.testing.assert_array_equal(sub[inside], full[inside])


def test_metric_subsets_by_stage():
    parts = ((0, 1), (2, 3), (4, 5))
    assert metric_subsets(parts, 1) == {}
    two = metric_subsets(parts, 2)
    assert set(two) == {"task1", "task2", "task1u2"}
    assert two["task1u2"] == (0, 1, 2, 3)
    three = metric_subsets(parts, 3)
    assert set(three) == set(METRIC_COLUMNS)
    assert three["task1u2u3"] == (0, 1, 2, 3, 4, 5)


@pytest.fixture(scope="module")
def two_head_snap():
    net = NetConfig(class_count=3, base_width=4, depth=2)
    t1 = build(net, seed=11, head_classes=[[0, 1, 2]]).snapshot("t1")
    return extend_for_model_based_stage(t1, [3, 4], seed=12).snapshot("t2")


def test_predict_multi_head_concatenates_groups(two_head_snap):
    x = np.random.default_rng(0).random((2, 3, 16, 16))
    pred = predict(two_head_snap, x, (0, 1, 2, 3, 4))
    assert pred.shape == (2, 16, 16)
    assert set(np.unique(pred)) <= {0, 1, 2, 3, 4}
    # restricting to one head's classes matches that head's own argmax
    only_new = predict(two_head_snap, x, (3, 4))
    assert set(np.unique(only_new)) <= {3, 4}
    with pytest.raises(ValueError):
        predict(two_head_snap, x, (9,))


def test_confusion_for_subset_matches_direct_loop(two_head_snap):
    from cilseg.data import to_input
    rng = np.random.default_rng(3)
    images = [rng.integers(0, 255, (16, 16, 3), dtype=np.uint8) for _ in range(5)]
    labels = [rng.integers(0, 5, (16, 16)).astype(np.uint8) for _ in range(5)]
    cm = confusion_for_subset(two_head_snap, images, labels, (0, 1, 2, 3, 4),
                              batch=2)
    want = ConfusionMatrix((0, 1, 2, 3, 4))
    for img, lab in zip(images, labels):
        pred = predict(two_head_snap, to_input(img)[None], (0, 1, 2, 3, 4))[0]
        want.accumulate(lab, pred)
    np.testing.assert_array_equal(cm.counts, want.counts)


def test_evaluate_snapshot_columns(two_head_snap):
    rng = np.random.default_rng(5)
    images = [rng.integers(0, 255, (16, 16, 3), dtype=np.uint8) for _ in range(3)]
    labels = [rng.integers(0, 5, (16, 16)).astype(np.uint8) for _ in range(3)]
    parts = ((0, 1, 2), (3, 4), (5, 6))
    rep = evaluate_snapshot(two_head_snap, images, labels, parts, stages_done=2)
    assert isinstance(rep, IoUReport)
    assert set(rep.by_subset) == {"task1", "task2", "task1u2"}
    assert all(v is None or 0.0 <= v <= 1.0 for v in rep.by_subset.values())
    with pytest.raises(ValueError):
        evaluate_snapshot(two_head_snap, images, labels, parts,
                          stages_done=2, columns=("task3",))
