import numpy as np
import pytest

from ofa.coords import BBox
from ofa.metrics import acc_at_05, closed_set_accuracy, exact_match, iou, token_f1


def test_iou_examples():
    a = BBox(0.1, 0.2, 0.6, 0.9)
    assert iou(a, a) == 1.0
    assert iou(BBox(0, 0, 0.5, 0.5), BBox(0.5, 0.5, 1, 1)) == 0.0
    assert iou(BBox(0, 0, 1, 1), BBox(0, 0, 0.5, 1)) == pytest.approx(0.5)


def test_iou_fuzz():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        xs, ys = np.sort(rng.random((2, 2)), axis=1), np.sort(rng.random((2, 2)), axis=1)
        a = BBox(xs[0, 0], ys[0, 0], xs[0, 1], ys[0, 1])
        b = BBox(xs[1, 0], ys[1, 0], xs[1, 1], ys[1, 1])
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == iou(b, a)


def test_acc_hand_counted():
    gold = [BBox(0, 0, 0.5, 0.5)] * 10
    preds = [
        BBox(0, 0, 0.5, 0.5),      # 1.0
        BBox(0, 0, 0.5, 0.25),     # 0.5, counts
        BBox(0, 0, 0.5, 0.24),     # 0.48
        BBox(0.5, 0.5, 1, 1),      # 0
        BBox(0.05, 0.05, 0.5, 0.5),  # 0.81
        BBox(0, 0, 1, 1),          # 0.25
        BBox(0.25, 0, 0.75, 0.5),  # 1/3
        BBox(0, 0, 0.6, 0.6),      # 0.694
        BBox(0.1, 0.1, 0.4, 0.4),  # 0.36
        BBox(0, 0, 0.5, 0.45),     # 0.9
    ]
    # hand count of IoU >= 0.5: items 0, 1, 4, 7, 9
    assert acc_at_05(preds, gold) == pytest.approx(0.5)
    assert acc_at_05(gold, gold) == 1.0
    with pytest.raises(ValueError):
        acc_at_05([], [])
    with pytest.raises(ValueError):
        acc_at_05(preds[:3], gold)


def test_text_metrics():
    assert exact_match("Red  Square", "red square")
    assert token_f1("red square", "red square") == 1.0
    assert token_f1("blue", "red square") == 0.0
    assert token_f1("a red square", "red square") == pytest.approx(0.8)
    assert closed_set_accuracy(["yes", "No", "yes"], ["yes", "no", "no"]) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        closed_set_accuracy([], [])
