import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import davies_bouldin_score

import oracles
from finealign.evalsuite import (IGNORE, MetricReport, average_precision, class_prototypes,
                                 coherence_map, confusion_matrix, dataset_miou, dbi, downsample_mask,
                                 mask_pool_instances, miou, ovss_segment, region_text_acc1,
                                 retrieval_recall, sample_pixel_pairs, similarity_map, upsample_nearest,
                                 zsc_top1)


def aligned_dense(mask_grid, K, d=6, rng=None):
    """Features equal to a per-class basis vector: perfectly class-aligned."""
    basis = np.eye(d)[:K] if rng is None else rng.normal(size=(K, d))
    return basis[mask_grid]


def quadrant_mask(S=8, order=(0, 1, 2, 3)):
    m = np.zeros((S, S), dtype=np.int64)
    h = S // 2
    m[:h, :h], m[:h, h:], m[h:, :h], m[h:, h:] = order
    return m


def test_dbi_zero_spread_and_oracle(rng):
    feats = {"a": np.tile([1.0, 0.0], (4, 1)), "b": np.tile([0.0, 3.0], (5, 1))}
    assert dbi(feats) == 0.0
    for _ in range(10):
        K = int(rng.integers(2, 5))
        groups = {f"c{k}": rng.normal(loc=k * 2.0, size=(int(rng.integers(2, 7)), 3)) for k in range(K)}
        X = np.concatenate(list(groups.values()))
        y = np.concatenate([[k] * len(v) for k, v in enumerate(groups.values())])
        assert abs(dbi(groups) - davies_bouldin_score(X, y)) < 1e-9
    with pytest.raises(ValueError):
        dbi({"a": np.ones((2, 2))})
    with pytest.raises(ValueError, match="coincident"):
        dbi({"a": np.ones((2, 2)), "b": np.ones((2, 2))})


def test_dbi_normalized_is_scale_free(rng):
    feats = {"a": rng.normal(size=(5, 3)) + 4, "b": rng.normal(size=(5, 3)) - 4}
    scaled = {k: 7.0 * v for k, v in feats.items()}
    assert dbi(feats, normalize=True) == pytest.approx(dbi(scaled, normalize=True))


def test_acc1():
    feats = {"a": np.array([[1.0, 0.1], [1.0, -0.1]]), "b": np.array([[0.0, 1.0], [1.0, 0.2]])}
    texts = {"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0])}
    assert region_text_acc1(feats, texts) == pytest.approx(0.75)
    with pytest.raises(ValueError):
        region_text_acc1({"a": feats["a"]}, texts)


def test_hand_computed_ap():
    # ranking: +, -, +, -, -, +  -> precisions at hits 1, 2/3, 1/2; envelope keeps them
    scores = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4]
    labels = [1, 0, 1, 0, 0, 1]
    assert average_precision(scores, labels) == (1 + 2 / 3 + 1 / 2) / 3
    # envelope raises an earlier precision: +, -, -, +, +  -> 1, max(2/4, 3/5)=3/5, 3/5
    assert average_precision([5, 4, 3, 2, 1], [1, 0, 0, 1, 1]) == pytest.approx((1 + 0.6 + 0.6) / 3)
    with pytest.raises(ValueError):
        average_precision([1, 2], [0, 0])


def test_ap_ties_are_stable():
    assert average_precision([1.0, 1.0], [1, 0]) == 1.0
    assert average_precision([1.0, 1.0], [0, 1]) == 0.5


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-1, 1), st.booleans()), min_size=1, max_size=40))
def test_ap_matches_oracle(pairs):
    scores = [p[0] for p in pairs]
    labels = [p[1] for p in pairs]
    if not any(labels):
        return
    ap = average_precision(scores, labels)
    assert 0.0 <= ap <= 1.0
    assert abs(ap - oracles.interpolated_ap(scores, labels)) < 1e-12


def test_coherence_perfect_alignment():
    masks = [quadrant_mask(16), quadrant_mask(16, (3, 2, 1, 0))]
    dense = [aligned_dense(downsample_mask(m, 4, 4), 4) for m in masks]
    for mode in ("per_image", "pooled"):
        assert coherence_map(dense, masks, 200, np.random.default_rng(0), mode) == 1.0


def test_coherence_deterministic_and_errors(rng):
    masks = [quadrant_mask(16)]
    dense = [rng.normal(size=(4, 4, 5))]
    a = coherence_map(dense, masks, 100, np.random.default_rng(3))
    b = coherence_map(dense, masks, 100, np.random.default_rng(3))
    assert a == b and 0 <= a <= 1
    with pytest.raises(ValueError):
        coherence_map(dense, [np.zeros((16, 16), dtype=int)], 100, np.random.default_rng(0))
    with pytest.raises(ValueError):
        coherence_map(dense, masks, 100, np.random.default_rng(0), mode="other")


def test_pair_sampling_distinct_and_labeled(rng):
    grid = np.full((4, 4), IGNORE)
    grid[0, :3] = [0, 1, 1]
    a, b = sample_pixel_pairs(grid, 500, rng)
    assert (a != b).all()
    assert set(a) | set(b) <= {0, 1, 2}


def test_mask_resampling():
    m = quadrant_mask(8)
    assert downsample_mask(m, 2, 2).tolist() == [[0, 1], [2, 3]]
    assert np.array_equal(upsample_nearest(downsample_mask(m, 2, 2), 8, 8), m)
    ign = np.full((4, 4), IGNORE)
    assert (downsample_mask(ign, 2, 2) == IGNORE).all()


def test_mask_pool_instances_cap(rng):
    masks = [quadrant_mask(8) for _ in range(5)]
    dense = [rng.normal(size=(2, 2, 3)) for _ in masks]
    inst = mask_pool_instances(dense, masks, ["a", "b", "c", "d"], n_cap=3, rng=rng)
    assert inst.K == 4 and all(v.shape == (3, 3) for v in inst.features.values())
    assert mask_pool_instances(dense, masks, ["a", "b", "c", "d"], n_cap=5, rng=rng).K == 0
    full = mask_pool_instances(dense, masks, ["a", "b", "c", "d"], n_cap=None)
    assert np.allclose(full.features["a"][0], dense[0][0, 0])


def test_miou_matches_oracle(rng):
    for _ in range(10):
        K = int(rng.integers(2, 6))
        gt = rng.integers(0, K, size=(6, 7))
        gt[0, 0] = IGNORE
        pred = rng.integers(0, K, size=(6, 7))
        assert abs(miou(pred, gt, K) - oracles.mean_iou(pred, gt, K)) < 1e-12
    cm = confusion_matrix(np.array([0, 1, 1]), np.array([0, 1, IGNORE]), 2)
    assert cm.tolist() == [[1, 0], [0, 1]]


def test_ovss_segment_and_prototypes(rng):
    masks = [quadrant_mask(16), quadrant_mask(16, (1, 0, 3, 2))]
    dense = [aligned_dense(downsample_mask(m, 4, 4), 4, d=6) for m in masks]
    protos = class_prototypes(dense, masks, 4)
    pred, up, score = ovss_segment(dense[0], protos, masks[0])
    assert score == 1.0 and up.shape == (16, 16)
    assert dataset_miou(dense, masks, protos) == 1.0
    with pytest.raises(ValueError):
        class_prototypes(dense, masks, 5)


def test_zsc_and_recall(rng):
    T = rng.normal(size=(3, 4))
    assert zsc_top1(T[[0, 1, 2, 0]], [0, 1, 2, 0], T) == 1.0
    I = rng.normal(size=(12, 5))
    Tx = I + 0.8 * rng.normal(size=(12, 5))
    out = retrieval_recall(I, Tx)
    for k in (1, 5, 10):
        assert abs(out[f"r{k}"] - oracles.recall_at_k(I, Tx, k)) < 1e-12
    assert out["mean_recall"] == pytest.approx(np.mean([out["r1"], out["r5"], out["r10"]]))
    with pytest.raises(ValueError):
        retrieval_recall(I[:5], Tx[:5])


def test_similarity_map():
    grid = np.zeros((2, 2, 2))
    grid[..., 0] = 1.0
    grid[1, 1] = [0.0, 1.0]
    sm = similarity_map(grid, (0, 0))
    assert sm.tolist() == [[1.0, 1.0], [1.0, 0.0]]
    assert np.allclose(similarity_map(grid, np.array([0.0, 2.0])), [[0, 0], [0, 1]])


def test_metric_report_validation():
    MetricReport(dbi=0.5, acc1=0.2).validate()
    with pytest.raises(ValueError):
        MetricReport(acc1=1.5).validate()
    with pytest.raises(ValueError):
        MetricReport(dbi=float("nan")).validate()
    with pytest.raises(ValueError):
        MetricReport(dbi=-1.0).validate()
    assert MetricReport(dbi=1.0, seed=3).to_json() == '{"dbi": 1.0, "seed": 3}'
