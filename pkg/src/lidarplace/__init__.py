"""Place recognition on imaging-lidar intensity images."""
from .bow import BowVector, Vocabulary, similarity, train, train_from_features
from .cloud_io import Point3I, Scan, SequenceManifest, load_scan, load_sequence, read_manifest, write_scan
from .database import BowDatabase, QueryResult
from .evaluation import EvalReport, GroundTruth, classify, ground_truth, resolution_study, roc
from .geometry import CylindricalModel, PnpResult, Pose, kabsch_init, pnp_ransac, refine, reproject
from .matching import MatchSet, hamming, match
from .orb import BriefPattern, FeatureSet, Keypoint, OrbExtractor, build_pyramid, detect_fast, extract
from .pipeline import Config, Detection, Recognizer, load_config
from .projection import IntensityImage, downsample_rows, normalize, pixel_point, project

__version__ = "0.1.0"
