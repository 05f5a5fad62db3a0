import numpy as np
import pytest

from dcdm.metrics import (
    ConfusionMatrix,
    compute,
    from_json,
    macro_f1_of,
    render_report,
)


def brute_force_class_counts(pairs, k):
    """tp/fp/fn/tn per class by direct enumeration over (true, pred)."""
    out = []
    for c in range(k):
        tp = sum(1 for t, p in pairs if t == c and p == c)
        fp = sum(1 for t, p in pairs if t != c and p == c)
        fn = sum(1 for t, p in pairs if t == c and p != c)
        tn = sum(1 for t, p in pairs if t != c and p != c)
        out.append((tp, fp, fn, tn))
    return out


def matrix_from_pairs(pairs, k):
    cm = ConfusionMatrix(k)
    for t, p in pairs:
        cm.update(t, p)
    return cm


def test_update_and_totals():
    cm = ConfusionMatrix(3)
    cm.update(1, 1)
    assert cm.trace == 1 and cm.total == 1
    cm.update(0, 2)
    cm.update(2, 2)
    assert cm.total == 3 and cm.trace == 2
    assert cm.counts[0, 2] == 1


def test_update_rejects_out_of_range():
    cm = ConfusionMatrix(3)
    with pytest.raises(IndexError):
        cm.update(3, 0)
    with pytest.raises(IndexError):
        cm.update(0, -1)
    with pytest.raises(ValueError):
        ConfusionMatrix(1)


def test_replay_oracle():
    rng = np.random.default_rng(0)
    pairs = [(int(rng.integers(0, 5)), int(rng.integers(0, 5)))
             for _ in range(500)]
    cm = matrix_from_pairs(pairs, 5)
    recount = np.zeros((5, 5), dtype=np.int64)
    for t, p in pairs:
        recount[t, p] += 1
    assert np.array_equal(cm.counts, recount)
    assert cm.total == 500


def test_merge_equals_recount():
    rng = np.random.default_rng(1)
    pairs = [(int(rng.integers(0, 4)), int(rng.integers(0, 4)))
             for _ in range(200)]
    full = matrix_from_pairs(pairs, 4)
    a = matrix_from_pairs(pairs[:90], 4)
    b = matrix_from_pairs(pairs[90:], 4)
    a.merge(b)
    assert np.array_equal(a.counts, full.counts)
    with pytest.raises(ValueError):
        a.merge(ConfusionMatrix(5))


def test_perfect_diagonal_scores_ones():
    cm = ConfusionMatrix(4)
    for c in range(4):
        for _ in range(7):
            cm.update(c, c)
    report = compute(cm)
    assert report.global_accuracy == 1.0
    assert report.macro_precision == report.macro_recall == report.macro_f1 == 1.0
    for m in report.per_class:
        assert m.precision == m.recall == m.f1 == m.accuracy == 1.0
        assert m.undefined == []


def test_reference_aggregate_f1_arithmetic():
    assert abs(macro_f1_of(0.9838, 0.9798) - 0.9817) <= 0.0002


def test_random_matrices_match_brute_force():
    rng = np.random.default_rng(2)
    for trial in range(200):
        k = int(rng.integers(2, 11))
        n = int(rng.integers(1, 120))
        pairs = [(int(rng.integers(0, k)), int(rng.integers(0, k)))
                 for _ in range(n)]
        cm = matrix_from_pairs(pairs, k)
        report = compute(cm)
        want = brute_force_class_counts(pairs, k)
        precisions, recalls = [], []
        for c, (tp, fp, fn, tn) in enumerate(want):
            m = report.per_class[c]
            assert (m.tp, m.fp, m.fn, m.tn) == (tp, fp, fn, tn)
            assert tp + fp + fn + tn == n
            precision = tp / (tp + fp) if tp + fp else 0.0
            recall = tp / (tp + fn) if tp + fn else 0.0
            assert m.precision == precision
            assert m.recall == recall
            f1 = 2 * precision * recall / (precision + recall) \
                if precision + recall else 0.0
            assert m.f1 == f1
            assert m.accuracy == (tp + tn) / n
            precisions.append(precision)
            recalls.append(recall)
        assert report.macro_precision == sum(precisions) / k
        assert report.macro_recall == sum(recalls) / k
        assert report.global_accuracy == cm.trace / n


def test_tp_fp_fn_conservation():
    rng = np.random.default_rng(3)
    pairs = [(int(rng.integers(0, 6)), int(rng.integers(0, 6)))
             for _ in range(300)]
    cm = matrix_from_pairs(pairs, 6)
    report = compute(cm)
    assert sum(m.tp for m in report.per_class) == cm.trace
    assert sum(m.fp for m in report.per_class) == cm.total - cm.trace
    assert sum(m.fn for m in report.per_class) == cm.total - cm.trace


def test_binary_case_matches_textbook():
    cm = ConfusionMatrix(2)
    # 8 true positives for class 1, 3 false alarms, 2 misses, 20 rejections
    for _ in range(8):
        cm.update(1, 1)
    for _ in range(3):
        cm.update(0, 1)
    for _ in range(2):
        cm.update(1, 0)
    for _ in range(20):
        cm.update(0, 0)
    m = compute(cm).per_class[1]
    assert (m.tp, m.fp, m.fn, m.tn) == (8, 3, 2, 20)
    assert m.precision == 8 / 11
    assert m.recall == 8 / 10
    assert m.accuracy == 28 / 33


def test_permuting_classes_permutes_metrics():
    rng = np.random.default_rng(4)
    counts = rng.integers(0, 30, size=(5, 5))
    cm = ConfusionMatrix(5)
    cm.counts = counts.astype(np.int64)
    report = compute(cm)
    perm = np.array([3, 0, 4, 1, 2])
    permuted = ConfusionMatrix(5)
    permuted.counts = counts[np.ix_(perm, perm)].astype(np.int64)
    preport = compute(permuted)
    for new_idx in range(5):
        old = report.per_class[perm[new_idx]]
        new = preport.per_class[new_idx]
        assert (new.tp, new.fp, new.fn, new.tn) == (old.tp, old.fp, old.fn, old.tn)
        assert new.precision == old.precision and new.recall == old.recall
    assert abs(preport.macro_precision - report.macro_precision) < 1e-12
    assert abs(preport.macro_recall - report.macro_recall) < 1e-12
    assert abs(preport.macro_f1 - report.macro_f1) < 1e-12
    assert abs(preport.global_accuracy - report.global_accuracy) < 1e-12


def test_zero_denominators_flagged():
    cm = ConfusionMatrix(3)
    cm.update(0, 0)
    cm.update(1, 0)  # class 2 never appears as true or predicted
    report = compute(cm)
    ghost = report.per_class[2]
    assert ghost.precision == 0.0 and ghost.recall == 0.0 and ghost.f1 == 0.0
    assert set(ghost.undefined) == {"precision", "recall", "f1"}
    assert ghost.accuracy == 1.0  # tn == total for an absent class
    healthy = report.per_class[0]
    assert healthy.undefined == []


def test_compute_rejects_empty():
    with pytest.raises(ValueError):
        compute(ConfusionMatrix(4))


def test_json_report_round_trip():
    rng = np.random.default_rng(5)
    cm = ConfusionMatrix(25)
    for _ in range(400):
        cm.update(int(rng.integers(0, 25)), int(rng.integers(0, 25)))
    report = compute(cm)
    rendered = render_report(report, "json")
    parsed = from_json(rendered)
    assert render_report(parsed, "json") == rendered
    import json
    obj = json.loads(rendered)
    assert len(obj["per_class"]) == 25
    assert obj["k"] == 25


def test_text_report_formatting():
    cm = ConfusionMatrix(2)
    cm.update(0, 0)
    cm.update(1, 1)
    text = render_report(compute(cm), "text").decode()
    assert "100.00%" in text
    named = render_report(compute(cm), "text",
                          labels=["apple_scab", "apple_healthy"]).decode()
    assert "apple_scab" in named
    with pytest.raises(ValueError):
        render_report(compute(cm), "yaml")
