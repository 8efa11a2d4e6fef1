import numpy as np
import pytest

from oracles import brute_force_assignment, iou_by_sets
from pc2m.metrics import beta_mix, confusion_matrix, f1_scores, hungarian_match, match_clusters, miou


def test_confusion_counts():
    cm = confusion_matrix([0, 1, 1, 2], [0, 1, 2, 2], 3)
    np.testing.assert_array_equal(cm, [[1, 0, 0], [0, 1, 1], [0, 0, 1]])
    assert cm.sum() == 4
    with pytest.raises(ValueError):
        confusion_matrix([0, 1], [0], 2)


def test_miou_examples():
    assert miou(np.diag([3, 5, 2]))[0] == 1.0
    value, per = miou(confusion_matrix([0, 1], [0, 0], 2))
    np.testing.assert_array_equal(per, [0.5, 0.0])
    assert value == 0.25
    with pytest.raises(ValueError):
        miou(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        miou(np.zeros((0, 0)))


def test_miou_skips_empty_union_and_background_toggle():
    value, per = miou(confusion_matrix([0, 0, 1], [0, 1, 1], 3))
    assert np.isnan(per[2])
    assert value == pytest.approx((0.5 + 0.5) / 2)
    fg, _ = miou(confusion_matrix([0, 1, 1, 2], [0, 1, 1, 0], 3), include_background=False)
    assert fg == pytest.approx((1.0 + 0.0) / 2)


def test_miou_matches_set_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        gt = rng.integers(0, 3, 200)
        pred = np.where(rng.uniform(size=200) < 0.6, gt, rng.integers(0, 3, 200))
        _, per = miou(confusion_matrix(gt, pred, 3))
        np.testing.assert_allclose(per, iou_by_sets(gt, pred, 3), atol=1e-15)


def test_miou_permutation_invariant():
    rng = np.random.default_rng(1)
    cm = rng.integers(0, 20, size=(5, 5))
    for _ in range(20):
        perm = rng.permutation(5)
        assert miou(cm[np.ix_(perm, perm)])[0] == pytest.approx(miou(cm)[0], abs=1e-15)


def test_hungarian_examples():
    s = np.eye(4) * 10 + np.random.default_rng(2).uniform(0, 1, (4, 4))
    np.testing.assert_array_equal(hungarian_match(s).mapping, np.arange(4))
    # identity and the swap both total 2; identity is lexicographically first
    np.testing.assert_array_equal(hungarian_match([[1, 1], [1, 1]]).mapping, [0, 1])
    # both 3-cycles total 3
    np.testing.assert_array_equal(hungarian_match([[0, 1, 1], [1, 0, 1], [1, 1, 0]]).mapping, [1, 2, 0])
    with pytest.raises(ValueError):
        hungarian_match(np.zeros((2, 3)))
    assert hungarian_match(np.zeros((0, 0))).mapping.size == 0


@pytest.mark.parametrize("k", range(1, 7))
def test_hungarian_matches_brute_force(k):
    rng = np.random.default_rng(k)
    for trial in range(60 if k < 6 else 15):
        if trial % 3 == 0:
            s = rng.integers(0, 3, size=(k, k)).astype(float)  # many ties
        else:
            s = rng.normal(size=(k, k))
        got = hungarian_match(s)
        perm, best = brute_force_assignment(s)
        assert got.score == pytest.approx(best, abs=1e-10)
        np.testing.assert_array_equal(got.mapping, perm)


def test_hungarian_is_bijective():
    a = hungarian_match(np.random.default_rng(7).normal(size=(6, 6)))
    assert sorted(a.mapping) == list(range(6))


def test_match_clusters_padding():
    clusters = [0, 0, 1, 1, 2, 2, 2]
    classes = [1, 1, 0, 0, 1, 0, 1]
    np.testing.assert_array_equal(match_clusters(clusters, classes, 3, 2), [1, 0, -1])
    np.testing.assert_array_equal(match_clusters([0, 1], [2, 0], 2, 3), [2, 0])


def test_f1_examples():
    gt = [{0, 1}, {0, 2}, {0}]
    assert f1_scores(gt, gt) == (1.0, 1.0)
    assert f1_scores([{1}, {1}], [{0}, {2}]) == (0.0, 0.0)
    with pytest.raises(ValueError):
        f1_scores([{0}], [])


def test_f1_hand_computed():
    pred = [{0, 1}, {0, 2}, {0}]
    gt = [{0, 1}, {0}, {0, 2}]
    # TP = 4 (three 0s, one 1); class 2 has FP = FN = 1
    micro, macro = f1_scores(pred, gt)
    assert micro == pytest.approx(8 / 10)
    assert macro == pytest.approx((1 + 1 + 0) / 3)


def test_f1_balanced_symmetric_micro_equals_macro():
    pred = [{0}, {1}, {0}, {1}]
    gt = [{0}, {1}, {1}, {0}]
    micro, macro = f1_scores(pred, gt)
    assert micro == pytest.approx(macro) and micro == pytest.approx(0.5)


def test_f1_bounds():
    rng = np.random.default_rng(3)
    for _ in range(200):
        pred = [set(rng.choice(5, rng.integers(0, 4), replace=False).tolist()) for _ in range(6)]
        gt = [set(rng.choice(5, rng.integers(1, 4), replace=False).tolist()) for _ in range(6)]
        micro, macro = f1_scores(pred, gt)
        assert 0.0 <= micro <= 1.0 and 0.0 <= macro <= 1.0


def test_beta_mix():
    gt = [{0, 1}, {0, 2}, {0, 3}, {0, 1}]
    pseudo = [{0, 9}, {0, 8}, {0, 7}, {0, 6}]
    mixed, rep = beta_mix(gt, pseudo, 0.0, 1)
    assert mixed == [frozenset(x) for x in gt] and rep.size == 0
    mixed, rep = beta_mix(gt, pseudo, 1.0, 1)
    assert mixed == [frozenset(x) for x in pseudo]
    mixed, rep = beta_mix(gt, pseudo, 0.5, 1)
    assert len(rep) == 2 and np.array_equal(rep, beta_mix(gt, pseudo, 0.5, 1)[1])
    for i in range(4):
        assert mixed[i] == frozenset(pseudo[i] if i in rep else gt[i])
    for bad in (-0.1, 1.1):
        with pytest.raises(ValueError):
            beta_mix(gt, pseudo, bad, 0)


def test_beta_mix_counts_round():
    labels = [{0}] * 10
    for beta, expected in [(0.25, 3), (0.35, 4), (0.5, 5), (0.04, 0)]:
        assert len(beta_mix(labels, labels, beta, 0)[1]) == expected
    seen = {tuple(beta_mix(labels, labels, 0.5, s)[1]) for s in range(10)}
    assert len(seen) > 1
