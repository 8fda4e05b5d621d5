import numpy as np
import pytest

from noteheads.evaluation import (
    PageMetrics,
    aggregate,
    containment_matrix,
    evaluate_page,
    format_table,
    match_detections,
    pixelwise_metrics,
)
from noteheads.raster import box_contains, box_iou, Box

from oracles import brute_force_matching_size, max_hit_matching


def random_instance(rng, n=8, size=60):
    truths = []
    for _ in range(n):
        t, l = rng.integers(0, size, 2)
        truths.append((t, l, t + rng.integers(4, 14), l + rng.integers(4, 14)))
    preds = []
    for t, l, b, r in truths[: n - 2]:
        j = rng.integers(-3, 4, 4)
        preds.append((t + j[0], l + j[1], max(t + j[0] + 1, b + j[2]), max(l + j[1] + 1, r + j[3])))
    while len(preds) < n:
        t, l = rng.integers(0, size, 2)
        preds.append((t, l, t + rng.integers(4, 20), l + rng.integers(4, 20)))
    return preds, truths


def hit_matrix(preds, truths):
    return np.array(
        [[box_iou(Box(*p), Box(*t)) > 0.5 or box_contains(Box(*p), Box(*t)) for t in truths] for p in preds]
    )


def test_identical_boxes():
    boxes = [(0, 0, 5, 5), (10, 10, 20, 18), (3, 30, 9, 40)]
    m = evaluate_page(boxes, boxes)
    assert (m.tp, m.fp, m.fn) == (3, 0, 0)
    assert m.precision == m.recall == m.f1 == 1.0


def test_containment_rescue():
    truth = (10, 10, 20, 20)
    pred = (7, 7, 23, 23)  # 100 / 256 < 0.5
    assert box_iou(Box(*pred), Box(*truth)) < 0.5
    match = match_detections([pred], [truth])
    assert match.pairs == [(0, 0, "containment")]


def test_containment_smallest_first_and_one_to_one():
    truths = [(10, 10, 20, 20)]
    preds = [(0, 0, 40, 40), (5, 5, 25, 25)]
    match = match_detections(preds, truths)
    assert match.pairs == [(1, 0, "containment")]
    assert match.unmatched_predictions == [0]


def test_iou_before_containment():
    truths = [(10, 10, 20, 20)]
    preds = [(0, 0, 40, 40), (10, 10, 20, 21)]
    match = match_detections(preds, truths)
    assert match.pairs == [(1, 0, "iou")]


def test_empty_inputs():
    assert evaluate_page([], []) == PageMetrics(0, 0, 0)
    assert evaluate_page([(0, 0, 1, 1)], []) == PageMetrics(0, 1, 0)
    assert evaluate_page([], [(0, 0, 1, 1)]) == PageMetrics(0, 0, 1)
    assert PageMetrics(0, 0, 0).precision == 0.0


def test_matching_oracles_agree():
    rng = np.random.default_rng(1)
    for _ in range(30):
        hits = rng.random((6, 5)) < 0.3
        assert max_hit_matching(hits) == brute_force_matching_size(hits)


def test_greedy_near_optimal_and_valid():
    for seed in range(100):
        preds, truths = random_instance(np.random.default_rng(seed))
        match = match_detections(preds, truths)
        used_p = [i for i, _, _ in match.pairs]
        used_t = [j for _, j, _ in match.pairs]
        assert len(set(used_p)) == len(used_p) and len(set(used_t)) == len(used_t)
        hits = hit_matrix(preds, truths)
        assert all(hits[i, j] for i, j, _ in match.pairs)
        assert len(match.pairs) >= max_hit_matching(hits) - 1
        m = PageMetrics.from_match(match)
        assert m.tp + m.fn == len(truths) and m.tp + m.fp == len(preds)


def test_counts_invariant_under_permutation():
    for seed in range(30):
        rng = np.random.default_rng(seed)
        preds, truths = random_instance(rng)
        base = evaluate_page(preds, truths)
        pp, tt = rng.permutation(len(preds)), rng.permutation(len(truths))
        assert evaluate_page([preds[i] for i in pp], [truths[j] for j in tt]) == base


def test_containment_matrix():
    a = [(0, 0, 10, 10)]
    b = [(0, 0, 10, 10), (2, 2, 5, 5), (5, 5, 11, 9)]
    assert containment_matrix(a, b).tolist() == [[True, True, False]]


def test_pixelwise_examples():
    assert pixelwise_metrics([0.9, 0.1], [1, 0]) == {"tp": 1, "fp": 0, "fn": 0, "precision": 1.0, "recall": 1.0}
    m = pixelwise_metrics([0.1] * 4, [1, 1, 0, 0])
    assert m["recall"] == 0 and m["precision"] == 0
    # 10 pixels: 7 TP, 2 FP, 1 FN
    p = [0.9] * 7 + [0.8, 0.7] + [0.2]
    truth = [1] * 7 + [0, 0] + [1]
    m = pixelwise_metrics(p, truth)
    assert m["precision"] == pytest.approx(7 / 9) and m["recall"] == pytest.approx(7 / 8)
    with pytest.raises(ValueError):
        pixelwise_metrics([0.5], [1, 0])


def test_aggregate():
    single = PageMetrics(3, 1, 2)
    out = aggregate([single])
    assert out["macro"]["precision"] == single.precision
    assert out["micro"]["f1"] == pytest.approx(single.f1)
    out = aggregate([PageMetrics(4, 0, 0), PageMetrics(2, 2, 0)])
    assert out["macro"]["precision"] == 0.75 and out["micro"]["precision"] == 0.75
    # unequal page sizes: macro P = (1 + 0.1) / 2, micro P = 11 / 20
    out = aggregate([PageMetrics(10, 0, 0), PageMetrics(1, 9, 0)])
    assert out["macro"]["precision"] == pytest.approx(0.55)
    assert out["micro"]["precision"] == pytest.approx(11 / 20)
    with pytest.raises(ValueError):
        aggregate([])


def test_format_table():
    pages = [("W-01_N-01", PageMetrics(3, 1, 0)), ("W-02_N-01", PageMetrics(2, 0, 1))]
    text = format_table(pages, aggregate(p for _, p in pages))
    lines = text.splitlines()
    assert lines[0].split()[0] == "page" and len(lines) == 5
    assert len({len(line) for line in lines}) == 1
