import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lidarplace.evaluation import (classify, ground_truth, query_labels, roc, roc_from_scores,
                                   write_roc)
from lidarplace.geometry import Pose
from lidarplace.pipeline import Detection, ScanRecord
from lidarplace.synth import figure_eight


def det(i, j, **timings):
    return Detection(i, j, 0.1, 20, 20, Pose.identity(), timings)


def brute_gt(traj, radius, gap):
    out = set()
    for a in range(len(traj)):
        for b in range(a + 1, len(traj)):
            ia, ta, pa = traj[a]
            ib, tb, pb = traj[b]
            if abs(ta - tb) > gap and np.linalg.norm(np.subtract(pa, pb)) <= radius:
                out.add((min(ia, ib), max(ia, ib)))
    return out


def test_straight_line_empty():
    traj = [(k, 0.5 * k, [1.0 * k, 0, 0]) for k in range(300)]
    assert len(ground_truth(traj, 2.0, 30.0)) == 0


def test_figure_eight_oracle():
    ts, poses = figure_eight(n=200)
    traj = [(k, t, p.translation) for k, (t, p) in enumerate(zip(ts, poses))]
    gt = ground_truth(traj, 2.0, 30.0)
    want = brute_gt(traj, 2.0, 30.0)
    assert gt.pairs == want and len(want) > 0
    # no pair from the same pass
    assert all(abs(ts[a] - ts[b]) > 30 for a, b in gt.pairs)


def test_gt_outdoor_radius():
    ts, poses = figure_eight(n=200)
    traj = [(k, t, p.translation) for k, (t, p) in enumerate(zip(ts, poses))]
    assert ground_truth(traj, 2.0).pairs < ground_truth(traj, 4.0).pairs
    assert ground_truth(traj, 4.0).pairs == brute_gt(traj, 4.0, 30.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=2, max_size=40))
def test_gt_symmetric(xy):
    traj = [(k, 10.0 * k, [x, y, 0.0]) for k, (x, y) in enumerate(xy)]
    rev = [(k, -t, p) for k, t, p in traj]
    gt = ground_truth(traj, 2.0, 15.0)
    assert gt.pairs == ground_truth(rev[::-1], 2.0, 15.0).pairs == brute_gt(traj, 2.0, 15.0)
    for a, b in gt.pairs:
        assert (a, b) in gt and (b, a) in gt


def test_classify_boundary():
    pos = {0: [0.0, 0, 0], 1: [1.9, 0, 0], 2: [2.0, 0, 0]}
    rep = classify([det(1, 0), det(2, 0)], pos, 2.0)
    assert (rep.detected, rep.tp, rep.fp) == (2, 1, 1)
    assert rep.tp + rep.fp == rep.detected


def test_classify_unknown_id():
    with pytest.raises(KeyError):
        classify([det(5, 0)], {0: [0, 0, 0]}, 2.0)


def test_summary_layout():
    pos = {k: [0.0, 0, 0] for k in range(300)}
    dets = [det(k + 50, k, project=10.0, extract=20.0, query=5.0, match=3.0, pnp=2.0) for k in range(215)]
    rep = classify(dets, pos)
    lines = rep.summary().splitlines()
    assert lines[0].split() == ["Method", "Detected", "loops", "True", "positives", "False", "positives",
                                "Time", "(ms)"]
    assert lines[1].split() == ["Ours", "215", "215", "(100%)", "0", "(0%)", "40.0"]


def test_auc_perfect():
    c = roc_from_scores([30, 25, 20, 5, 1, -1], [1, 1, 1, 0, 0, 0])
    assert c.auc == 1.0


def test_auc_random():
    rng = np.random.default_rng(0)
    labels = rng.random(1000) < 0.3
    scores = rng.permutation(rng.integers(-1, 60, 1000))
    assert abs(roc_from_scores(scores, labels).auc - 0.5) <= 0.1


def mann_whitney(scores, labels):
    pos, neg = scores[labels], scores[~labels]
    diff = pos[:, None] - neg[None, :]
    return ((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size


@pytest.mark.parametrize("seed", range(5))
def test_auc_mann_whitney(seed):
    rng = np.random.default_rng(seed)
    labels = rng.random(200) < 0.4
    scores = np.where(labels, rng.integers(0, 60, 200), rng.integers(-1, 40, 200)).astype(float)
    scores[rng.random(200) < 0.2] = -1
    c = roc_from_scores(scores, labels)
    assert abs(c.auc - mann_whitney(scores, labels)) <= 1e-6


def test_no_positives():
    c = roc_from_scores([1, 2, 3], [0, 0, 0])
    assert c.auc is None and c.n_pos == 0


def test_query_labels_and_roc(tmp_path):
    # scans 0..5; true loops (0, 4) and (1, 5)
    traj = [(k, 40.0 * k, [0.0, 0, 0] if k in (0, 4) else [10.0, 0, 0] if k in (1, 5) else [50.0 * k, 0, 0])
            for k in range(6)]
    gt = ground_truth(traj, 2.0, 30.0)
    assert gt.pairs == {(0, 4), (1, 5)}
    recs = [ScanRecord(0, 0, 10), ScanRecord(1, 40, 10), ScanRecord(2, 80, 10),
            ScanRecord(3, 120, 10, candidate=0, inliers=12),   # wrong candidate: negative
            ScanRecord(4, 160, 10, candidate=0, inliers=40),   # correct: positive
            ScanRecord(5, 200, 10)]                            # missed loop: positive, score -1
    s, y = query_labels(recs, gt)
    assert s.tolist() == [-1, -1, -1, 12, 40, -1]
    assert y.tolist() == [False, False, False, False, True, True]
    c = roc(recs, gt)
    assert (c.n_pos, c.n_neg) == (2, 4)
    assert c.auc == pytest.approx(mann_whitney(s, y), abs=1e-12)
    write_roc(c, tmp_path / "roc.csv")
    lines = (tmp_path / "roc.csv").read_text().splitlines()
    assert lines[0] == "threshold,fpr,tpr" and len(lines) == len(c.thresholds) + 1
    with pytest.raises(ValueError):
        roc(recs, gt, score="other")
