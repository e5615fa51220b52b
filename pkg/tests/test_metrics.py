import math

import numpy as np
import pytest

from dasolab.errors import InputError
from dasolab.metrics import (
    evaluate,
    median_last_k,
    minority_classes,
    pl_quality,
    pl_quality_arrays,
)
from dasolab.nn_core import init_model


def test_perfect_pseudo_labels():
    truth = [0, 1, 2, 2, 1]
    rep = pl_quality([(t, 1) for t in truth], truth, 3)
    assert np.all(rep.recall == 1) and np.all(rep.precision == 1)
    assert rep.coverage == 1.0
    assert np.all(rep.rel_size == 1)


def test_degenerate_single_class_predictor():
    truth = [0, 0, 1, 2, 2, 2]
    rep = pl_quality([(0, 1)] * 6, truth, 3)
    assert rep.recall.tolist() == [1.0, 0.0, 0.0]
    assert rep.precision[0] == pytest.approx(2 / 6)
    assert math.isnan(rep.precision[1]) and math.isnan(rep.precision[2])


def test_hand_counted_two_class_case():
    rep = pl_quality([(0, 1), (1, 1), (1, 1), (1, 1)], [0, 0, 1, 1], 2)
    assert rep.recall.tolist() == [0.5, 1.0]
    assert rep.precision == pytest.approx([1.0, 2 / 3])
    assert rep.rel_size == pytest.approx([0.5, 1.5])


def test_masked_samples_are_excluded():
    rep = pl_quality([(0, 1), (1, 0), (1, 1), (0, 0)], [0, 0, 1, 1], 2)
    assert rep.recall.tolist() == [1.0, 1.0]
    assert rep.coverage == 0.5


def test_misaligned_inputs():
    with pytest.raises(InputError):
        pl_quality([(0, 1)], [0, 1], 2)


def test_micro_recall_equals_masked_accuracy():
    rng = np.random.default_rng(0)
    truth = rng.integers(4, size=200)
    preds = np.where(rng.random(200) < 0.7, truth, rng.integers(4, size=200))
    mask = rng.random(200) < 0.6
    rep = pl_quality_arrays(preds, mask, truth, 4)
    counts = np.bincount(truth[mask], minlength=4)
    micro = np.sum(rep.recall * counts) / counts.sum()
    assert micro == pytest.approx(np.mean(preds[mask] == truth[mask]), abs=1e-12)


def test_constant_logit_model():
    model = init_model([2, 4], 3, 0)
    for a in model.ema_arrays():
        a[...] = 0.0
    x = np.random.default_rng(0).normal(size=(30, 2))
    y = np.repeat(np.arange(3), 10)
    rep = evaluate(model, x, y, use_ema=True)
    assert rep.per_class_acc.tolist() == [1.0, 0.0, 0.0]
    assert rep.balanced_acc == pytest.approx(1 / 3)
    assert rep.confusion.sum(axis=1).tolist() == [10, 10, 10]
    assert rep.overall_acc == pytest.approx(np.trace(rep.confusion) / 30)


def test_permutation_equivariance():
    rng = np.random.default_rng(1)
    model = init_model([2, 6], 4, 3)
    x = rng.normal(size=(40, 2))
    y = np.repeat(np.arange(4), 10)
    rep = evaluate(model, x, y, use_ema=False)
    perm = np.array([2, 0, 3, 1])
    permuted = model.copy()
    w, b = permuted.classifier
    permuted.classifier = (w[:, perm], b[perm])
    inv = np.argsort(perm)
    rep2 = evaluate(permuted, x, inv[y], use_ema=False)
    assert rep2.balanced_acc == rep.balanced_acc
    assert np.array_equal(rep2.per_class_acc[inv], rep.per_class_acc)
    assert np.array_equal(rep2.confusion[np.ix_(inv, inv)], rep.confusion)


def test_minority_group_size():
    assert minority_classes(10).tolist() == [8, 9]
    assert minority_classes(5).tolist() == [4]
    assert minority_classes(6).tolist() == [4, 5]


def test_median_last_k():
    assert median_last_k([1, 2, 3], 20) == 2
    assert median_last_k([5, 6, 10, 20, 30, 40], 4) == 25
    assert median_last_k([0.7] * 30, 20) == 0.7
    with pytest.raises(InputError):
        median_last_k([], 20)
