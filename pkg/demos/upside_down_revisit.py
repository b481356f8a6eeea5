"""
Recognising a place with the sensor upside down
===============================================

Two visits to the same hall, 40 s apart. On the second visit the sensor is
rolled by 180 degrees, which flips the intensity image both ways. The ORB
features are rotation invariant, so the revisit is still found and PnP
recovers the roll.
"""
import numpy as np

from lidarplace.bow import train_from_features
from lidarplace.orb import OrbExtractor
from lidarplace.pipeline import Recognizer
from lidarplace.projection import project
from lidarplace.synth import revisit_pair, training_scans

# the vocabulary comes from halls that the demo never revisits
ex = OrbExtractor()
vocab = train_from_features([ex.extract(project(s)) for s in training_scans()], k=10, L=6)
print(f"vocabulary: {vocab.n_words} words")

for kind in ("roll", "reverse"):
    scans, poses = revisit_pair(kind, seed=0)
    a = project(scans[0]).pixels
    b = project(scans[1]).pixels
    print(f"\n{kind}: mean |image difference| {np.abs(a.astype(int) - b).mean():.1f} grey levels")

    rec = Recognizer(vocab)
    dets = rec.run(scans)
    r = rec.records[1]
    print(f"candidate {r.candidate}, bow score {r.bow_score:.3f}, {r.matches} matches, {r.inliers} inliers")
    if dets:
        d = dets[0]
        truth = poses[0].inverse() @ poses[1]  # frame of scan 1 into frame of scan 0
        err = (truth.inverse() @ d.pose).rotation_angle()
        dt = np.linalg.norm(truth.translation - d.pose.translation)
        print(f"detected {d.i} -> {d.j}; rotation {np.degrees(d.pose.rotation_angle()):.2f} deg, "
              f"error vs truth {np.degrees(err):.3f} deg, {100 * dt:.1f} cm")
