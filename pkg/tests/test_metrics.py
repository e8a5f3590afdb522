import metric_oracles as oracle
import numpy as np
import pytest

from pvlff.metrics import coverage, miou_macc, panoptic_quality, pq_scene, scene_report


def noisy_maps(rng, shape=(16, 16), classes=4, ids=4, flip=0.2):
    gc = rng.integers(0, classes, shape)
    gi = rng.integers(0, ids, shape)
    pc, pi = gc.copy(), gi.copy()
    m = rng.random(shape) < flip
    pc[m] = rng.integers(0, classes, m.sum())
    m = rng.random(shape) < flip
    pi[m] = rng.integers(0, ids, m.sum())
    return pc, pi, gc, gi


def test_semantic_examples():
    g = np.array([[0, 0, 1, 1]])
    s = miou_macc(g, g)
    assert s.miou == s.macc == 1.0
    s = miou_macc(np.zeros_like(g), g)
    assert s.miou == pytest.approx(0.25) and s.macc == pytest.approx(0.5)
    assert not miou_macc(g, g, ignore=np.ones_like(g, bool)).defined


def test_semantic_class_restriction_and_errors():
    g = np.array([0, 1, 2, 2])
    s = miou_macc(np.array([0, 1, 1, 2]), g, classes=[1, 2])
    assert set(s.iou) == {1, 2} and s.iou[1] == 0.5
    with pytest.raises(ValueError):
        miou_macc(g, g[:3])
    with pytest.raises(ValueError):
        miou_macc(g - 1, g)


def test_semantic_vs_oracle(rng):
    for _ in range(50):
        pc, _, gc, _ = noisy_maps(rng, flip=0.4)
        ig = rng.random(pc.shape) < 0.1
        s = miou_macc(pc, gc, ignore=ig)
        want = oracle.miou_macc(pc, gc, ig)
        assert s.miou == pytest.approx(want[0], abs=1e-12) and s.macc == pytest.approx(want[1], abs=1e-12)


def test_pq_examples():
    gc = np.array([1, 1, 1, 1, 0, 0])
    gi = np.array([1, 1, 1, 1, 0, 0])
    assert panoptic_quality(gc, gi, gc, gi).pq == 1.0
    # a prediction covering half of the segment has IoU 1/3 with a region twice its size
    pc = np.array([1, 1, 0, 0, 0, 0])
    pi = np.array([1, 1, 0, 0, 0, 0])
    r = panoptic_quality(pc, pi, gc, gi)
    assert r.per_class[1] == (0.0, 0.0, 0.0)
    # the stuff class misses too: IoU 2/4 is not above one half
    assert r.per_class[0] == (0.0, 0.0, 0.0)
    assert r.tp == 0 and r.fp == 2 and r.fn == 2


def test_pq_vs_oracle(rng):
    for _ in range(50):
        pc, pi, gc, gi = noisy_maps(rng, classes=3, ids=3, flip=0.15)
        ig = rng.random(pc.shape) < 0.1
        r = panoptic_quality(pc, pi, gc, gi, ignore=ig)
        np.testing.assert_allclose((r.pq, r.sq, r.rq), oracle.panoptic(pc, pi, gc, gi, ig), atol=1e-12)


def test_pq_scene_merges_across_frames():
    # one instance split over two frames, predicted with one consistent id
    gc = [np.array([[1, 1], [0, 0]]), np.array([[1, 1], [0, 0]])]
    gi = [np.array([[3, 3], [0, 0]]), np.array([[3, 3], [0, 0]])]
    pi = [np.array([[5, 5], [0, 0]]), np.array([[5, 5], [0, 0]])]
    r = pq_scene([(gc[k], pi[k], gc[k], gi[k]) for k in range(2)])
    assert r.pq == 1.0 and r.tp == 2  # one thing plus one stuff segment
    # inconsistent ids across frames split the prediction in two halves
    pi[1] = np.array([[6, 6], [0, 0]])
    r = pq_scene([(gc[k], pi[k], gc[k], gi[k]) for k in range(2)])
    assert r.per_class[1][0] == 0.0
    with pytest.raises(ValueError):
        pq_scene([])


def test_pq_scene_single_frame_is_pq(rng):
    for _ in range(20):
        f = noisy_maps(rng)
        a, b = pq_scene([f]), panoptic_quality(*f)
        assert (a.pq, a.sq, a.rq) == (b.pq, b.sq, b.rq)


def test_pq_scene_vs_oracle(rng):
    for _ in range(20):
        frames = [noisy_maps(rng, classes=3, ids=3, flip=0.1) for _ in range(3)]
        ig = [rng.random((16, 16)) < 0.05 for _ in range(3)]
        r = pq_scene(frames, ignore=ig)
        np.testing.assert_allclose((r.pq, r.sq, r.rq), oracle.pq_scene(frames, ig), atol=1e-12)


def test_coverage_examples():
    g = np.array([1, 1, 2, 2, 0])
    c = coverage(g, g)
    assert c.mcov == c.mwcov == 1.0
    gt = np.array([1, 1, 1, 0])
    pred = np.array([1, 1, 1, 1])  # overlap 3 of a union of 4
    c = coverage(pred, gt)
    assert c.mcov == c.mwcov == 0.75
    assert not coverage(pred, np.zeros(4, int)).defined


def test_coverage_vs_oracle(rng):
    for _ in range(50):
        _, pi, _, gi = noisy_maps(rng, ids=5, flip=0.3)
        ig = rng.random(pi.shape) < 0.1
        c = coverage(pi, gi, ignore=ig)
        np.testing.assert_allclose((c.mcov, c.mwcov), oracle.coverage(pi, gi, ig), atol=1e-12)


def test_relabeling_invariance_and_range(rng):
    for _ in range(20):
        pc, pi, gc, gi = noisy_maps(rng)
        perm = rng.permutation(10)
        perm = np.concatenate([[0], perm[perm > 0]])  # keep stuff id 0 fixed
        a, b = panoptic_quality(pc, pi, gc, gi), panoptic_quality(pc, perm[pi], gc, gi)
        assert (a.pq, a.sq, a.rq) == (b.pq, b.sq, b.rq)
        assert 0.0 <= a.pq <= 1.0 and 0.0 <= a.sq <= 1.0 and 0.0 <= a.rq <= 1.0
        ca, cb = coverage(pi, gi), coverage(perm[pi], gi)
        assert (ca.mcov, ca.mwcov) == (cb.mcov, cb.mwcov)
        assert 0.0 <= ca.mcov <= 1.0 and 0.0 <= ca.mwcov <= 1.0


def test_weighted_coverage_favours_large_instances():
    gt = np.array([1] * 12 + [2] * 2)
    pred = np.array([1] * 12 + [0] * 2)  # the big instance is perfect, the small one missed
    c = coverage(pred, gt)
    assert c.mwcov > c.mcov


def test_scene_report_rows(rng):
    frames = [noisy_maps(rng, flip=0.1) for _ in range(2)]
    pc = np.stack([f[0] for f in frames])
    pi = np.stack([f[1] for f in frames])
    gc = np.stack([f[2] for f in frames])
    gi = np.stack([f[3] for f in frames])
    rows = scene_report(pc, pc, pi, pc, pi, gc, gi, class_names=["bg", "a", "b", "c"])
    d = {(m, c): v for m, c, v in rows}
    assert d[("miou", "all")] == d[("miou_raw", "all")]
    assert d[("mcov", "all")] == coverage(pi, gi).mcov
    assert d[("pq_scene", "all")] == pq_scene(frames).pq
    assert ("iou", "a") in d
