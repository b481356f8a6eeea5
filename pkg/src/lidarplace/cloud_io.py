"""Scan containers and readers/writers for the supported point cloud formats.

Formats:

* ``csv``: one ``x,y,z,intensity`` record per line.
* ``pcd``: ASCII PCD restricted to ``FIELDS x y z intensity``.
* ``bin``: flat little-endian records of four float32 ``(x, y, z, intensity)``.

A sequence manifest is a CSV with rows ``path,timestamp[,tx,ty,tz,qx,qy,qz,qw]``.
Relative paths are resolved against the manifest's directory.
"""
from __future__ import annotations

import csv
import logging
import os
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .geometry import Pose

log = logging.getLogger(__name__)

FORMATS = ("csv", "pcd", "bin")
_EXT_FORMAT = {".csv": "csv", ".txt": "csv", ".pcd": "pcd", ".bin": "bin"}


class Point3I(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float


@dataclass
class Scan:
    """A timestamped point cloud. ``points`` is an (N, 4) float64 array of x, y, z, intensity."""

    points: np.ndarray
    timestamp: float = 0.0
    id: int = 0
    n_dropped: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"points must have shape (N, 4), got {pts.shape}")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]

    def point(self, k: int) -> Point3I:
        return Point3I(*map(float, self.points[k]))

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


def _format_for(path, fmt):
    if fmt is not None:
        if fmt not in FORMATS:
            raise ValueError(f"unknown scan format {fmt!r}; expected one of {FORMATS}")
        return fmt
    ext = os.path.splitext(str(path))[1].lower()
    try:
        return _EXT_FORMAT[ext]
    except KeyError:
        raise ValueError(f"cannot infer scan format from extension {ext!r}") from None


def _filter_records(pts, path):
    """Drop records with non-finite coordinates; reject bad intensities."""
    bad = ~np.isfinite(pts[:, :3]).all(axis=1)
    n_bad = int(bad.sum())
    if n_bad:
        warnings.warn(f"{path}: dropped {n_bad} record(s) with NaN/inf coordinates")
        pts = pts[~bad]
    inten = pts[:, 3]
    wrong = ~np.isfinite(inten) | (inten < 0)
    if wrong.any():
        k = int(np.flatnonzero(wrong)[0])
        raise ValueError(f"{path}: record {k} has invalid intensity {inten[k]!r}")
    return pts, n_bad


def _read_csv(path):
    rows = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed number in {line!r}") from None
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def _read_pcd(path):
    with open(path, "r") as fh:
        lines = fh.readlines()
    header = {}
    body_start = None
    for lineno, line in enumerate(lines, start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        key, _, rest = s.partition(" ")
        header[key.upper()] = rest.split()
        if key.upper() == "DATA":
            body_start = lineno
            break
    if body_start is None:
        raise ValueError(f"{path}: missing DATA line in PCD header")
    if [f.lower() for f in header.get("FIELDS", [])] != ["x", "y", "z", "intensity"]:
        raise ValueError(f"{path}: only 'FIELDS x y z intensity' is supported")
    if header["DATA"] != ["ascii"]:
        raise ValueError(f"{path}: only DATA ascii is supported")
    rows = []
    for lineno in range(body_start + 1, len(lines) + 1):
        s = lines[lineno - 1].strip()
        if not s:
            continue
        parts = s.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: malformed number in {s!r}") from None
    pts = np.array(rows, dtype=np.float64).reshape(-1, 4)
    if "POINTS" in header and int(header["POINTS"][0]) != len(pts):
        raise ValueError(f"{path}: header declares {header['POINTS'][0]} points, found {len(pts)}")
    return pts


def _read_bin(path):
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % 16:
        good = raw.size - raw.size % 16
        raise ValueError(f"{path}: truncated record at byte offset {good} (file size {raw.size})")
    return raw.view("<f4").reshape(-1, 4).astype(np.float64)


def load_scan(path, format: Optional[str] = None, timestamp: float = 0.0, id: int = 0) -> Scan:
    """Read one scan. The format is inferred from the extension when not given."""
    fmt = _format_for(path, format)
    reader = {"csv": _read_csv, "pcd": _read_pcd, "bin": _read_bin}[fmt]
    pts = reader(path)
    pts, n_bad = _filter_records(pts, path)
    if len(pts) == 0:
        warnings.warn(f"{path}: scan contains no points")
    return Scan(pts, timestamp=timestamp, id=id, n_dropped=n_bad)


def write_scan(scan: Scan, path, format: Optional[str] = None):
    fmt = _format_for(path, format)
    pts = scan.points
    if fmt == "bin":
        pts.astype("<f4").tofile(path)
    elif fmt == "csv":
        with open(path, "w") as fh:
            for x, y, z, i in pts.tolist():
                fh.write(f"{x!r},{y!r},{z!r},{i!r}\n")
    else:
        with open(path, "w") as fh:
            fh.write("VERSION 0.7\nFIELDS x y z intensity\nSIZE 4 4 4 4\nTYPE F F F F\n"
                     "COUNT 1 1 1 1\n")
            fh.write(f"WIDTH {len(pts)}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\n")
            fh.write(f"POINTS {len(pts)}\nDATA ascii\n")
            for x, y, z, i in pts.tolist():
                fh.write(f"{x!r} {y!r} {z!r} {i!r}\n")


@dataclass
class ManifestEntry:
    path: str
    timestamp: float
    pose: Optional[Pose] = None


@dataclass
class SequenceManifest:
    entries: list = field(default_factory=list)
    root: str = "."

    def resolve(self, entry: ManifestEntry) -> str:
        return entry.path if os.path.isabs(entry.path) else os.path.join(self.root, entry.path)


def read_manifest(path) -> SequenceManifest:
    entries = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            if lineno == 1 and row[0].strip() == "path":
                continue
            if len(row) not in (2, 9):
                raise ValueError(f"{path}:{lineno}: expected 2 or 9 fields, got {len(row)}")
            try:
                ts = float(row[1])
                pose = None
                if len(row) == 9:
                    vals = [float(v) for v in row[2:]]
                    pose = Pose.from_quaternion(vals[3:], vals[:3], tol=1e-6)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            entries.append(ManifestEntry(row[0].strip(), ts, pose))
    return SequenceManifest(entries, root=os.path.dirname(os.path.abspath(path)))


def write_manifest(manifest: SequenceManifest, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "timestamp", "tx", "ty", "tz", "qx", "qy", "qz", "qw"])
        for e in manifest.entries:
            row = [e.path, repr(float(e.timestamp))]
            if e.pose is not None:
                row += [repr(float(v)) for v in e.pose.translation]
                row += [repr(float(v)) for v in e.pose.quaternion]
            w.writerow(row)


def load_sequence(manifest, format: Optional[str] = None) -> list:
    """Load every scan listed in ``manifest`` (a SequenceManifest or a path to one).

    Returns a list of ``(Scan, Pose or None)`` with ids 0..n-1 in timestamp order.
    """
    if not isinstance(manifest, SequenceManifest):
        manifest = read_manifest(manifest)
    ts = [e.timestamp for e in manifest.entries]
    for k in range(1, len(ts)):
        if not ts[k] > ts[k - 1]:
            raise ValueError(f"manifest timestamps not strictly increasing at entry {k}: "
                             f"{ts[k - 1]} -> {ts[k]}")
    out = []
    for k, e in enumerate(manifest.entries):
        p = manifest.resolve(e)
        if not os.path.exists(p):
            raise FileNotFoundError(p)
        out.append((load_scan(p, format, timestamp=e.timestamp, id=k), e.pose))
    return out
