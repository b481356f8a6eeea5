"""Per-scan place recognition: project, extract, query, match, verify."""
from __future__ import annotations

import dataclasses
import hashlib
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bow import Vocabulary
from .cloud_io import Scan
from .database import BowDatabase
from .geometry import CylindricalModel, Pose, ransac_consensus
from .matching import match
from .orb import BriefPattern, OrbExtractor
from .projection import IntensityImage, downsample_rows, project

STAGES = ("project", "extract", "query", "match", "pnp")


@dataclass
class Config:
    width: int = 1024
    height: int = 128
    vfov: float = 45.0
    rows: int = 0  # keep every (height / rows)-th image row; 0 keeps all
    n_levels: int = 8
    scale_factor: float = 1.2
    fast_threshold: int = 20
    n_bow: int = 2500
    n_s: int = 500
    n_m: int = 15
    n_p: int = 15
    lambda_bow: float = 0.015
    lambda_floor: float = 25.0
    inlier_px: float = 5.0
    exclusion: float = 30.0
    max_candidates: int = 1
    max_iters: int = 200
    vocabulary: str = ""
    pattern_seed: int = 0
    ransac_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        counts = ("width", "height", "n_levels", "fast_threshold", "n_bow", "n_s", "n_m", "n_p",
                  "max_candidates", "max_iters")
        for key in counts:
            if getattr(self, key) < 1:
                raise ValueError(f"{key}: count must be >= 1, got {getattr(self, key)}")
        if not 0 < self.lambda_bow < 1:
            raise ValueError(f"lambda_bow: must lie in (0, 1), got {self.lambda_bow}")
        if self.exclusion < 0:
            raise ValueError(f"exclusion: must be >= 0, got {self.exclusion}")
        if self.vfov <= 0:
            raise ValueError(f"vfov: must be positive, got {self.vfov}")
        if self.scale_factor <= 1:
            raise ValueError(f"scale_factor: must be > 1, got {self.scale_factor}")
        if self.inlier_px <= 0 or self.lambda_floor < 0:
            raise ValueError("inlier_px must be positive and lambda_floor non-negative")
        if self.rows < 0 or (self.rows and self.height % self.rows):
            raise ValueError(f"rows: {self.rows} does not divide height {self.height}")

    @property
    def image_rows(self):
        return self.rows or self.height

    def digest(self) -> str:
        """Short hash of every setting, for tagging reports."""
        text = ";".join(f"{k}={v!r}" for k, v in sorted(dataclasses.asdict(self).items()))
        return hashlib.sha1(text.encode()).hexdigest()[:12]


def load_config(path) -> Config:
    """Read flat ``key = value`` lines; ``#`` starts a comment. Missing keys keep defaults."""
    types = {f.name: f.type for f in dataclasses.fields(Config)}
    casts = {"int": int, "float": float, "str": str}
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep or not key:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            if key not in types:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                values[key] = casts[types[key]](value)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad value {value!r} for {key}") from None
    return Config(**values)


@dataclass
class Detection:
    """Query scan ``i`` recognised as a revisit of scan ``j``.

    ``pose`` maps points from the frame of scan i into the frame of scan j.
    """

    i: int
    j: int
    bow_score: float
    matches: int
    inliers: int
    pose: Pose
    timings: dict = field(default_factory=dict)


@dataclass
class ScanRecord:
    """What happened to one scan. ``inliers`` is -1 when no candidate reached PnP."""

    i: int
    timestamp: float
    n_features: int
    candidate: int = -1
    bow_score: float = 0.0
    matches: int = 0
    inliers: int = -1
    detected: bool = False
    timings: dict = field(default_factory=dict)


class Recognizer:
    """Holds the vocabulary, the BoW database and the features of every processed scan."""

    def __init__(self, vocab: Vocabulary, config: Optional[Config] = None):
        self.config = config or Config()
        cfg = self.config
        if vocab.pattern_seed != cfg.pattern_seed:
            raise ValueError(f"config pattern_seed {cfg.pattern_seed} does not match the "
                             f"vocabulary's {vocab.pattern_seed}")
        self.vocab = vocab
        self.db = BowDatabase(vocab.pattern_seed)
        self.extractor = OrbExtractor(n_features=cfg.n_bow, n_levels=cfg.n_levels,
                                      scale=cfg.scale_factor, fast_threshold=cfg.fast_threshold,
                                      pattern=BriefPattern(cfg.pattern_seed))
        self.model = CylindricalModel(cfg.width, cfg.image_rows, cfg.vfov)
        self.features = []
        self.records = []

    def image(self, scan: Scan) -> IntensityImage:
        cfg = self.config
        img = project(scan, cfg.width, cfg.height, cfg.vfov)
        if cfg.rows and cfg.rows != cfg.height:
            img = downsample_rows(img, cfg.rows)
        return img

    def process_scan(self, scan: Scan) -> Optional[Detection]:
        cfg = self.config
        timings = {}
        clock = time.perf_counter

        t0 = clock()
        img = self.image(scan)
        t1 = clock()
        feats = self.extractor.extract(img)
        feats.scan_id = scan.id
        t2 = clock()
        vec = self.vocab.transform(feats)
        result = self.db.query(vec, scan.timestamp, cfg.exclusion, cfg.lambda_bow, cfg.max_candidates)
        self.db.insert(vec, scan.timestamp, scan.id)
        self.features.append(feats)
        t3 = clock()
        timings.update(project=1e3 * (t1 - t0), extract=1e3 * (t2 - t1), query=1e3 * (t3 - t2))

        rec = ScanRecord(scan.id, scan.timestamp, len(feats), timings=timings)
        self.records.append(rec)
        detection = None
        t_match = t_pnp = 0.0
        ran_pnp = False
        for entry, score in result:
            cand = self.features[entry]
            t3 = clock()
            ms = match(feats, cand, cfg.n_s, cfg.lambda_floor)
            t4 = clock()
            t_match += t4 - t3
            inliers, pose = -1, None
            if len(ms) > cfg.n_m:
                ran_pnp = True
                res = ransac_consensus(self.model, feats.points[ms.i, :3], cand.uv[ms.j],
                                       cand.points[ms.j, :3], cfg.inlier_px, cfg.max_iters,
                                       cfg.ransac_seed)
                t_pnp += clock() - t4
                if res is not None:
                    inliers, pose = len(res.inliers), res.pose
            if rec.candidate < 0 or inliers > rec.inliers:
                rec.candidate, rec.bow_score, rec.matches, rec.inliers = (
                    self.db.scan_ids[entry], score, len(ms), inliers)
            if inliers > cfg.n_p:
                detection = Detection(scan.id, self.db.scan_ids[entry], score, len(ms), inliers, pose,
                                      timings)
                rec.candidate, rec.bow_score, rec.matches, rec.inliers = (
                    detection.j, score, len(ms), inliers)
                break
        if len(result):
            timings["match"] = 1e3 * t_match
        if ran_pnp:
            timings["pnp"] = 1e3 * t_pnp
        rec.detected = detection is not None
        return detection

    def run(self, scans) -> list:
        """Process scans in order; returns the detections."""
        out = []
        for scan in scans:
            det = self.process_scan(scan)
            if det is not None:
                out.append(det)
        return out


DETECTION_HEADER = ("i,j,bow_score,matches,inliers,tx,ty,tz,qx,qy,qz,qw,"
                    "t_project_ms,t_extract_ms,t_query_ms,t_match_ms,t_pnp_ms")


def detection_row(d: Detection, timings=True) -> str:
    t, q = d.pose.translation, d.pose.quaternion
    ms = [d.timings.get(s, 0.0) if timings else 0.0 for s in STAGES]
    vals = [f"{v:.9g}" for v in (*t, *q)] + [f"{v:.3f}" for v in ms]
    return f"{d.i},{d.j},{d.bow_score:.9g},{d.matches},{d.inliers}," + ",".join(vals)


def write_detections(detections, path, timings=True):
    """Detection CSV; with ``timings=False`` the stage columns are written as 0."""
    with open(path, "w") as fh:
        fh.write(DETECTION_HEADER + "\n")
        for d in detections:
            fh.write(detection_row(d, timings) + "\n")


def read_detections(path) -> list:
    out = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != DETECTION_HEADER:
            raise ValueError(f"{path}: unexpected detection header")
        for lineno, line in enumerate(fh, start=2):
            f = line.strip().split(",")
            if len(f) != 17:
                raise ValueError(f"{path}:{lineno}: expected 17 fields")
            vals = [float(x) for x in f[5:]]
            pose = Pose.from_quaternion(vals[3:7], vals[:3], tol=1e-6)
            timings = dict(zip(STAGES, vals[7:]))
            out.append(Detection(int(f[0]), int(f[1]), float(f[2]), int(f[3]), int(f[4]), pose, timings))
    return out


RECORD_HEADER = "i,timestamp,n_features,candidate,bow_score,matches,inliers,detected"


def write_records(records, path):
    """Per-scan outcomes, the input for ROC analysis."""
    with open(path, "w") as fh:
        fh.write(RECORD_HEADER + "\n")
        for r in records:
            fh.write(f"{r.i},{r.timestamp!r},{r.n_features},{r.candidate},{r.bow_score:.9g},"
                     f"{r.matches},{r.inliers},{int(r.detected)}\n")


def read_records(path) -> list:
    out = []
    with open(path) as fh:
        if fh.readline().strip() != RECORD_HEADER:
            raise ValueError(f"{path}: unexpected record header")
        for line in fh:
            f = line.strip().split(",")
            out.append(ScanRecord(int(f[0]), float(f[1]), int(f[2]), int(f[3]), float(f[4]),
                                  int(f[5]), int(f[6]), bool(int(f[7]))))
    return out
