"""
From a point cloud to ORB features
==================================

Render one synthetic 128-beam scan, project it to a 1024x128 intensity
image and look at the features that come out of it.
"""
import numpy as np

from lidarplace.geometry import Pose
from lidarplace.orb import OrbExtractor
from lidarplace.projection import project, write_pgm
from lidarplace.synth import room_scene, synth_scene

# a textured hall, sensor 1.2 m above the floor
scene = room_scene(seed=3)
scan = synth_scene(scene, Pose.from_rotvec([0, 0, 0.4], [2.0, 1.0, 1.2]))
print(f"{len(scan)} returns, intensity range {scan.intensity.min():.0f} .. {scan.intensity.max():.0f}")

# nearest return per cell, intensities stretched between the 1st and 99th percentile
img = project(scan)
print(f"image {img.pixels.shape}, {img.valid.mean():.1%} of cells hit")
write_pgm(img, "intensity.pgm")

feats = OrbExtractor().extract(img)
print(f"{len(feats)} features")
print("per pyramid level:", np.bincount(feats.level).tolist())

# every feature carries the 3D point behind its pixel
r = np.linalg.norm(feats.points[:, :3], axis=1)
print(f"feature ranges {r.min():.1f} .. {r.max():.1f} m")

# descriptors are 256 bits, stored as 32 bytes
print(feats.descriptors.shape, feats.descriptors.dtype)
