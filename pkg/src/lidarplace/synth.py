"""Analytic ray-casting of textured planar scenes with a spinning-lidar beam pattern.

Beam ``(row, col)`` points at azimuth ``(col + 0.5) * 2pi / W - pi`` and
elevation ``vfov/2 - (row + 0.5) * vfov / H``, so every return lands back in
its own cell under :func:`lidarplace.projection.project`. The beam grid is
symmetric under a 180 degree roll and under yaw steps of ``2pi / W``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .cloud_io import Scan
from .geometry import Pose


# -- textures -----------------------------------------------------------------

@dataclass
class Constant:
    value: float = 100.0

    def __call__(self, s, t):
        return np.full(np.shape(s), float(self.value))


@dataclass
class Checkerboard:
    cell: float = 0.5
    low: float = 20.0
    high: float = 800.0

    def __call__(self, s, t):
        k = (np.floor(s / self.cell) + np.floor(t / self.cell)).astype(np.int64) % 2
        return np.where(k == 0, self.low, self.high)


@dataclass
class Blocks:
    """Grid of random intensities (a 'poster'); cell values drawn once from ``seed``."""

    cell: float = 0.25
    seed: int = 0
    low: float = 10.0
    high: float = 1000.0
    shape: tuple = (64, 64)
    values: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.values = rng.uniform(self.low, self.high, self.shape)

    def __call__(self, s, t):
        i = np.floor(s / self.cell).astype(np.int64) % self.shape[0]
        j = np.floor(t / self.cell).astype(np.int64) % self.shape[1]
        return self.values[i, j]


@dataclass
class Disks:
    """Random discs of random intensity over a constant background."""

    extent: tuple = (4.0, 3.0)
    count: int = 30
    radius: tuple = (0.1, 0.4)
    seed: int = 0
    background: float = 150.0
    low: float = 10.0
    high: float = 1000.0

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.centers = rng.uniform((0, 0), self.extent, (self.count, 2))
        self.radii = rng.uniform(*self.radius, self.count)
        self.levels = rng.uniform(self.low, self.high, self.count)

    def __call__(self, s, t):
        out = np.full(np.shape(s), float(self.background))
        for (cx, cy), r, val in zip(self.centers, self.radii, self.levels):
            out[(s - cx) ** 2 + (t - cy) ** 2 <= r * r] = val
        return out


# -- scene ------------------------------------------------------------------

@dataclass
class Patch:
    """Rectangle ``origin + a * edge_u + b * edge_v`` for a, b in [0, 1).

    Texture coordinates are meters along the two (orthogonal) edges.
    """

    origin: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    texture: object = field(default_factory=Constant)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.edge_u = np.asarray(self.edge_u, dtype=np.float64)
        self.edge_v = np.asarray(self.edge_v, dtype=np.float64)
        if abs(self.edge_u @ self.edge_v) > 1e-9 * np.linalg.norm(self.edge_u) * np.linalg.norm(self.edge_v):
            raise ValueError("patch edges must be orthogonal")


@dataclass
class Scene:
    patches: list = field(default_factory=list)
    bounds: Optional[tuple] = None  # (lo xyz, hi xyz) allowed sensor positions
    min_range: float = 0.3
    max_range: float = 120.0

    def contains(self, position) -> bool:
        if self.bounds is None:
            return True
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.bounds)
        p = np.asarray(position, dtype=np.float64)
        return bool(np.all(p >= lo) and np.all(p <= hi))


def beam_directions(W=1024, H=128, vfov=45.0):
    """Unit beam directions in the sensor frame, shape (H, W, 3)."""
    az = (np.arange(W) + 0.5) * (2 * np.pi / W) - np.pi
    el = np.radians(0.5 * vfov - (np.arange(H) + 0.5) * (vfov / H))
    ce, se = np.cos(el)[:, None], np.sin(el)[:, None]
    return np.stack([ce * np.cos(az)[None, :], ce * np.sin(az)[None, :],
                     np.broadcast_to(se, (H, W))], axis=-1)


def synth_scene(scene: Scene, pose: Pose, W: int = 1024, H: int = 128, vfov: float = 45.0,
                noise: float = 0.0, seed: int = 0, timestamp: float = 0.0, id: int = 0) -> Scan:
    """Ray-cast ``scene`` from a sensor at ``pose`` (sensor -> world).

    Returned points are in the sensor frame, one per beam that hits a patch,
    in row-major beam order. ``noise`` is a relative multiplicative intensity
    noise level drawn from ``seed``.
    """
    if not scene.contains(pose.translation):
        raise ValueError(f"sensor position {pose.translation} outside scene bounds")
    d = beam_directions(W, H, vfov).reshape(-1, 3)
    R, origin = pose.rotation, pose.translation
    dw = d @ R.T
    best = np.full(len(d), np.inf)
    owner = np.full(len(d), -1, dtype=np.int64)
    coords = np.zeros((len(d), 2))
    for k, patch in enumerate(scene.patches):
        n = np.cross(patch.edge_u, patch.edge_v)
        denom = dw @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            tt = ((patch.origin - origin) @ n) / denom
        cand = np.isfinite(tt) & (tt > scene.min_range) & (tt < scene.max_range) & (tt < best)
        if not cand.any():
            continue
        ci = np.flatnonzero(cand)
        rel = origin + tt[ci, None] * dw[ci] - patch.origin
        uu = patch.edge_u @ patch.edge_u
        vv = patch.edge_v @ patch.edge_v
        a = rel @ patch.edge_u / uu
        b = rel @ patch.edge_v / vv
        hit = (a >= 0) & (a < 1) & (b >= 0) & (b < 1)
        ci = ci[hit]
        best[ci] = tt[ci]
        owner[ci] = k
        coords[ci, 0] = a[hit] * np.sqrt(uu)
        coords[ci, 1] = b[hit] * np.sqrt(vv)
    hits = np.flatnonzero(owner >= 0)
    inten = np.empty(len(hits))
    for k in np.unique(owner[hits]):
        sel = owner[hits] == k
        ci = hits[sel]
        inten[sel] = scene.patches[k].texture(coords[ci, 0], coords[ci, 1])
    if noise > 0 and len(hits):
        rng = np.random.default_rng(seed)
        inten = inten * np.clip(1.0 + noise * rng.standard_normal(len(hits)), 0.0, None)
    pts = np.column_stack([best[hits, None] * d[hits], inten])
    return Scan(pts, timestamp=timestamp, id=id)


# -- scene builders ------------------------------------------------------------

def _wall_segments(p0, p1, z0, z1, seg_len, rng, patches):
    """Split the vertical wall from p0 to p1 into separately textured panels."""
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    length = np.linalg.norm(p1 - p0)
    n_seg = max(1, int(round(length / seg_len)))
    step = (p1 - p0) / n_seg
    height = z1 - z0
    for s in range(n_seg):
        o = np.array([*(p0 + s * step), z0])
        eu = np.array([*step, 0.0])
        ev = np.array([0.0, 0.0, height])
        patches.append(Patch(o, eu, ev, random_texture(rng, (np.linalg.norm(step), height))))


def random_texture(rng, extent):
    kind = rng.integers(0, 3)
    seed = int(rng.integers(2**31))
    if kind == 2:
        return Disks(extent=tuple(extent), count=max(4, int(extent[0] * extent[1] * 2.5)),
                     radius=(0.12, 0.45), seed=seed, background=float(rng.uniform(50, 400)))
    cell = float(rng.uniform(0.18, 0.45))
    return Blocks(cell=cell, seed=seed, shape=(int(extent[0] / cell) + 1, int(extent[1] / cell) + 1))


def box_patches(center, size, z0, rng):
    """Four textured vertical faces of an axis-aligned box (pillar/crate)."""
    cx, cy = center
    sx, sy, sz = size
    x0, x1, y0, y1 = cx - sx / 2, cx + sx / 2, cy - sy / 2, cy + sy / 2
    out = []
    corners = [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]
    for a, b in zip(corners[:-1], corners[1:]):
        _wall_segments(a, b, z0, z0 + sz, 10.0, rng, out)
    return out


def room_scene(seed=0, size=(36.0, 20.0, 4.0), n_boxes=14, keep_clear=None, clear_radius=1.2,
               panel=3.0) -> Scene:
    """Textured hall: panelled walls, floor, ceiling and free-standing boxes.

    ``keep_clear`` is an optional (n, 2) array of xy positions no box may come
    within ``clear_radius`` of (e.g. a trajectory).
    """
    rng = np.random.default_rng(seed)
    L, Wd, Hh = size
    x0, x1, y0, y1 = -L / 2, L / 2, -Wd / 2, Wd / 2
    patches = []
    for a, b in [((x0, y0), (x1, y0)), ((x1, y0), (x1, y1)), ((x1, y1), (x0, y1)), ((x0, y1), (x0, y0))]:
        _wall_segments(a, b, 0.0, Hh, panel, rng, patches)
    # floor and ceiling tiles
    tile = 6.0
    for z in (0.0, Hh):
        for xs in np.arange(x0, x1 - 1e-9, tile):
            for ys in np.arange(y0, y1 - 1e-9, tile):
                ex, ey = min(tile, x1 - xs), min(tile, y1 - ys)
                patches.append(Patch([xs, ys, z], [ex, 0, 0], [0, ey, 0], random_texture(rng, (ex, ey))))
    clear = None if keep_clear is None else np.asarray(keep_clear, dtype=float).reshape(-1, 2)
    placed = 0
    tries = 0
    while placed < n_boxes and tries < 1000:
        tries += 1
        c = rng.uniform((x0 + 2, y0 + 2), (x1 - 2, y1 - 2))
        sx, sy = rng.uniform(0.6, 1.8, 2)
        if clear is not None and np.min(np.linalg.norm(clear - c, axis=1)) < clear_radius + max(sx, sy):
            continue
        patches += box_patches(c, (sx, sy, rng.uniform(1.0, Hh)), 0.0, rng)
        placed += 1
    return Scene(patches, bounds=((x0 + 0.2, y0 + 0.2, 0.2), (x1 - 0.2, y1 - 0.2, Hh - 0.2)))


def corridor_scene(seed=0, length=40.0, width=3.0, height=3.0, panel=2.5) -> Scene:
    """Straight corridor along x with textured panels on both walls, floor and ceiling."""
    rng = np.random.default_rng(seed)
    x0, x1 = -length / 2, length / 2
    y0, y1 = -width / 2, width / 2
    patches = []
    _wall_segments((x0, y0), (x1, y0), 0.0, height, panel, rng, patches)
    _wall_segments((x1, y1), (x0, y1), 0.0, height, panel, rng, patches)
    _wall_segments((x0, y1), (x0, y0), 0.0, height, panel, rng, patches)
    _wall_segments((x1, y0), (x1, y1), 0.0, height, panel, rng, patches)
    for z in (0.0, height):
        for xs in np.arange(x0, x1 - 1e-9, panel):
            patches.append(Patch([xs, y0, z], [panel, 0, 0], [0, width, 0], random_texture(rng, (panel, width))))
    return Scene(patches, bounds=((x0 + 0.2, y0 + 0.2, 0.2), (x1 - 0.2, y1 - 0.2, height - 0.2)))


def figure_eight(n=200, laps=2, a=12.0, b=6.0, duration=100.0, height=1.2, lateral=0.25,
                 attitude_deg=3.0, seed=0):
    """Poses and timestamps along a figure-eight, heading along the path.

    Successive laps are offset sideways by ``lateral`` meters (alternating) and
    carry small random roll/pitch so revisits are not pixel-identical.
    Returns ``(timestamps, poses)``.
    """
    rng = np.random.default_rng(seed)
    ts = np.linspace(0.0, duration, n, endpoint=False)
    phase = (ts / duration * laps) % 1.0
    lap = np.floor(ts / duration * laps).astype(int)
    th = 2 * np.pi * phase
    x, y = a * np.sin(th), b * np.sin(2 * th)
    dx, dy = a * np.cos(th), 2 * b * np.cos(2 * th)
    yaw = np.arctan2(dy, dx)
    off = np.where(lap % 2 == 0, 0.0, lateral)
    x = x - off * np.sin(yaw)
    y = y + off * np.cos(yaw)
    poses = []
    for k in range(n):
        roll, pitch = np.radians(rng.normal(0, attitude_deg, 2))
        R = Rotation.from_euler("zyx", [yaw[k], pitch, roll]).as_matrix()
        poses.append(Pose.from_matrix(R, [x[k], y[k], height]))
    return ts, poses


# -- ready-made benchmark data -------------------------------------------------

def figure_eight_sequence(seed=0, n=200, **kw):
    """A textured hall with a figure-eight drive through it: ``(scans, poses)``."""
    ts, poses = figure_eight(n=n, seed=seed, **kw)
    scene = room_scene(seed=seed + 1, keep_clear=np.array([p.translation[:2] for p in poses]))
    scans = [synth_scene(scene, p, timestamp=float(t), id=k) for k, (t, p) in enumerate(zip(ts, poses))]
    return scans, poses


def training_scans(seed=0, n_scenes=4, per_scene=6):
    """Scans from random spots in halls that share no seed with the benchmarks."""
    rng = np.random.default_rng(seed)
    out = []
    for s in range(n_scenes):
        scene = room_scene(seed=10_000 + seed * 100 + s)
        lo, hi = scene.bounds
        for _ in range(per_scene):
            xy = rng.uniform(np.add(lo[:2], 1.0), np.subtract(hi[:2], 1.0))
            pose = Pose.from_rotvec([0, 0, rng.uniform(-np.pi, np.pi)], [xy[0], xy[1], 1.2])
            out.append(synth_scene(scene, pose, timestamp=float(len(out)), id=len(out)))
    return out


def revisit_pair(kind, seed=0, gap=40.0):
    """Two scans of one place ``gap`` seconds apart, the second upside down or reversed.

    ``kind="roll"``: a hall, revisited with the sensor rolled 180 degrees.
    ``kind="reverse"``: a corridor, revisited heading the opposite way.
    Returns ``(scans, poses)``.
    """
    rng = np.random.default_rng(seed)
    if kind == "roll":
        scene = room_scene(seed=20_000 + seed)
        c = rng.uniform([-8, -4], [8, 4])
        first = Pose.from_rotvec([0, 0, rng.uniform(-np.pi, np.pi)], [c[0], c[1], 1.5])
        d = rng.normal(0, 0.2, 2)
        R = first.rotation @ Rotation.from_rotvec([np.pi, 0, 0]).as_matrix()
        second = Pose.from_matrix(R, [c[0] + d[0], c[1] + d[1], 1.6])
    elif kind == "reverse":
        scene = corridor_scene(seed=30_000 + seed)
        x = rng.uniform(-10, 10)
        first = Pose.from_rotvec([0, 0, 0], [x, 0, 1.2])
        second = Pose.from_rotvec([0, 0, np.pi], [x + rng.uniform(-0.5, 0.5), rng.uniform(-0.3, 0.3), 1.2])
    else:
        raise ValueError(f"unknown revisit kind {kind!r}")
    poses = [first, second]
    scans = [synth_scene(scene, p, timestamp=k * gap, id=k) for k, p in enumerate(poses)]
    return scans, poses
