"""
Synthetic benchmark: a figure-eight drive
=========================================

Drive twice around a figure eight through a textured hall, run the detector
on every scan and score the detections against the known trajectory. Also
sweeps the PnP inlier count for a ROC curve and repeats the run with fewer
image rows. Takes a few minutes on one core.
"""
import warnings

import numpy as np

from lidarplace.bow import train_from_features
from lidarplace.evaluation import classify, ground_truth, resolution_study, roc, write_roc
from lidarplace.orb import OrbExtractor
from lidarplace.pipeline import Config, Recognizer, write_detections
from lidarplace.projection import project
from lidarplace.synth import figure_eight_sequence, training_scans

warnings.simplefilter("ignore")  # 16-row images are too small for the pyramid

ex = OrbExtractor()
vocab = train_from_features([ex.extract(project(s)) for s in training_scans()], k=10, L=6)

scans, poses = figure_eight_sequence(seed=0, n=200)
positions = {s.id: p.translation for s, p in zip(scans, poses)}
traj = [(s.id, s.timestamp, p.translation) for s, p in zip(scans, poses)]
gt = ground_truth(traj, radius=2.0, min_gap=30.0)
print(f"{len(scans)} scans, {len(gt)} true loop pairs")

rec = Recognizer(vocab, Config())
dets = rec.run(scans)
write_detections(dets, "detections.csv")
print(classify(dets, positions, 2.0).summary())

stages = ("project", "extract", "query", "match", "pnp")
mean = {k: float(np.mean([r.timings.get(k, 0.0) for r in rec.records])) for k in stages}
print("mean ms per scan:", {k: round(v, 1) for k, v in mean.items()})

curve = roc(rec.records, gt)
write_roc(curve, "roc.csv")
print(f"ROC over inlier count: AUC {curve.auc:.3f} ({curve.n_pos} positive / {curve.n_neg} negative queries)")

# fewer lidar channels: keep every 2nd, 4th, 8th row
for rep in resolution_study(scans, poses, vocab, Config(), rows=(128, 64, 32, 16)):
    print(f"{rep.extra['rows']:>4} rows: {rep.detected:>4} detected, {rep.tp} TP, "
          f"{rep.extra['mean_features']:.0f} features/scan")
