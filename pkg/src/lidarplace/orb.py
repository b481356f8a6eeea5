"""Oriented FAST + steered BRIEF features on cylindrical intensity images.

Images wrap horizontally (column ``W`` is column 0); rows have hard borders.
All resampling and smoothing is written so that flipping the input in both
axes (a 180 degree sensor roll) flips every intermediate result exactly.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from numba import njit

from .projection import IntensityImage, continuous_coords


N_LEVELS = 8
SCALE_FACTOR = 1.2
MIN_LEVEL_SIZE = 32
EDGE = 16
PATCH_SIZE = 31
HALF_PATCH = 15
FAST_THRESHOLD = 20
FAST_MIN_CORNERS = 50
HARRIS_K = 0.04
HARRIS_SIGMA = 1.5
BLUR_SIGMA = 2.0
ANGLE_BINS = 30
GRID = (64, 16)
N_BITS = 256

# radius-3 Bresenham circle, clockwise from 12 o'clock, as (dx, dy)
CIRCLE = np.array([(0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
                   (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3)],
                  dtype=np.int64)


class Keypoint(NamedTuple):
    u: float
    v: float
    level: int
    score: float
    angle: float


@dataclass(frozen=True)
class BriefPattern:
    """256 point pairs inside the radius-15 patch, drawn from an isotropic Gaussian."""

    seed: int = 0
    pairs: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        sigma = PATCH_SIZE / 5.0
        pairs = []
        while len(pairs) < N_BITS:
            p = rng.normal(0.0, sigma, 4)
            if p[0] ** 2 + p[1] ** 2 > 14.5 ** 2 or p[2] ** 2 + p[3] ** 2 > 14.5 ** 2:
                continue
            if np.all(np.round(p[:2]) == np.round(p[2:])):
                continue
            pairs.append(p)
        object.__setattr__(self, "pairs", np.array(pairs))

    def rotated(self) -> np.ndarray:
        """Integer offsets (bins, 256, 4) = (pdx, pdy, qdx, qdy) for each 12 degree angle bin."""
        half = ANGLE_BINS // 2
        out = np.empty((ANGLE_BINS, N_BITS, 4), dtype=np.int64)
        for b in range(half):
            th = 2 * np.pi * b / ANGLE_BINS
            c, s = np.cos(th), np.sin(th)
            for j in (0, 2):
                x, y = self.pairs[:, j], self.pairs[:, j + 1]
                out[b, :, j] = np.round(c * x - s * y)
                out[b, :, j + 1] = np.round(s * x + c * y)
            out[b + half] = -out[b]
        return out


@dataclass
class FeatureSet:
    """Features of one scan, sorted by descending corner score.

    ``u, v`` are continuous level-0 pixel coordinates (pixel ``c`` spans
    ``[c, c+1)``); ``x, y`` the integer position on pyramid ``level``;
    ``points`` the associated (x, y, z, intensity) in the sensor frame.
    """

    scan_id: int
    u: np.ndarray
    v: np.ndarray
    x: np.ndarray
    y: np.ndarray
    level: np.ndarray
    score: np.ndarray
    angle: np.ndarray
    descriptors: np.ndarray
    points: np.ndarray
    pattern_seed: int = 0

    def __len__(self):
        return len(self.u)

    @classmethod
    def empty(cls, scan_id=0, pattern_seed=0):
        z = np.zeros(0)
        zi = np.zeros(0, dtype=np.int64)
        return cls(scan_id, z, z, zi, zi, zi, z, z, np.zeros((0, 32), np.uint8),
                   np.zeros((0, 4)), pattern_seed)

    def keypoint(self, k) -> Keypoint:
        return Keypoint(float(self.u[k]), float(self.v[k]), int(self.level[k]),
                        float(self.score[k]), float(self.angle[k]))

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureSet(self.scan_id, self.u[idx], self.v[idx], self.x[idx], self.y[idx],
                          self.level[idx], self.score[idx], self.angle[idx],
                          self.descriptors[idx], self.points[idx], self.pattern_seed)

    @property
    def uv(self):
        return np.column_stack([self.u, self.v])

    def write_csv(self, path):
        """Debug dump: u, v, level, score, angle."""
        with open(path, "w") as fh:
            fh.write("u,v,level,score,angle\n")
            for k in range(len(self)):
                fh.write(f"{self.u[k]!r},{self.v[k]!r},{self.level[k]},{self.score[k]!r},{self.angle[k]!r}\n")


# -- pyramid ------------------------------------------------------------------

def level_shapes(H, W, n_levels=N_LEVELS, scale=SCALE_FACTOR, min_size=MIN_LEVEL_SIZE):
    shapes = []
    for lv in range(n_levels):
        f = scale ** lv
        h, w = int(math.floor(H / f)), int(math.floor(W / f))
        if min(h, w) < min_size:
            break
        shapes.append((h, w))
    return shapes


def _axis_weights(n_src, n_dst, wrap):
    """Source taps and weights for pixel-centre aligned resampling.

    Positions are evaluated as exact integer fractions, so a mirrored output
    pixel gets exactly the mirrored taps and swapped weights.
    """
    num = (2 * np.arange(n_dst, dtype=np.int64) + 1) * n_src - n_dst
    den = 2 * n_dst
    i0 = num // den
    rem = num - i0 * den
    w0, w1 = (den - rem) / den, rem / den
    i1 = i0 + 1
    if wrap:
        i0 %= n_src
        i1 %= n_src
    else:
        i0 = np.clip(i0, 0, n_src - 1)
        i1 = np.clip(i1, 0, n_src - 1)
    return i0, i1, w0, w1


def resize_bilinear(img, shape):
    """Bilinear resampling that wraps columns and clamps rows."""
    src = np.asarray(img, dtype=np.float64)
    h, w = shape
    r0, r1, a0, a1 = _axis_weights(src.shape[0], h, wrap=False)
    c0, c1, b0, b1 = _axis_weights(src.shape[1], w, wrap=True)
    rows = src[r0] * a0[:, None] + src[r1] * a1[:, None]
    out = rows[:, c0] * b0[None, :] + rows[:, c1] * b1[None, :]
    return out


def build_pyramid(img, n_levels=N_LEVELS, scale=SCALE_FACTOR, min_size=MIN_LEVEL_SIZE):
    """List of uint8 level images; level 0 is ``img`` itself.

    Levels smaller than ``min_size`` in either dimension are dropped with a
    warning; fewer than two usable levels is an error.
    """
    pixels = img.pixels if isinstance(img, IntensityImage) else np.asarray(img)
    H, W = pixels.shape
    shapes = level_shapes(H, W, n_levels, scale, min_size)
    if len(shapes) < 2:
        raise ValueError(f"image {W}x{H} too small for a 2-level pyramid (min size {min_size})")
    if len(shapes) < n_levels:
        warnings.warn(f"image {W}x{H}: only {len(shapes)} of {n_levels} pyramid levels fit")
    levels = [np.ascontiguousarray(pixels, dtype=np.uint8)]
    for shp in shapes[1:]:
        lv = resize_bilinear(levels[-1], shp)
        levels.append(np.floor(lv + 0.5).clip(0, 255).astype(np.uint8))
    return levels


def gaussian_blur(img, sigma=BLUR_SIGMA, radius=3):
    """Separable Gaussian, wrapped horizontally, edge-replicated vertically.

    Mirror taps are summed before weighting so flipped inputs give bit-identical
    flipped outputs.
    """
    src = np.asarray(img, dtype=np.float64)
    k = np.exp(-0.5 * (np.arange(radius + 1) / sigma) ** 2)
    k /= k[0] + 2 * k[1:].sum()
    out = k[0] * src
    for d in range(1, radius + 1):
        out = out + k[d] * (np.roll(src, d, axis=1) + np.roll(src, -d, axis=1))
    tmp = out
    H = src.shape[0]
    rows = np.arange(H)
    out = k[0] * tmp
    for d in range(1, radius + 1):
        out = out + k[d] * (tmp[np.clip(rows - d, 0, H - 1)] + tmp[np.clip(rows + d, 0, H - 1)])
    return out


# -- kernels ------------------------------------------------------------------
# Kernels take images padded by PAD wrapped columns on each side, so a column
# offset |dx| <= PAD never needs a modulo.

PAD = 16


def pad_columns(img, pad=PAD):
    img = np.asarray(img)
    return np.ascontiguousarray(np.concatenate([img[:, -pad:], img, img[:, :pad]], axis=1))


@njit(cache=True)
def _fast_score_map(P, t, wrap, margin, circle, pad):
    """FAST-9 score (largest arc-minimum contrast) where it exceeds ``t``, else 0."""
    H = P.shape[0]
    W = P.shape[1] - 2 * pad
    out = np.zeros((H, W), dtype=np.int32)
    x_lo, x_hi = (0, W) if wrap else (margin, W - margin)
    vals = np.empty(16, dtype=np.int32)
    for y in range(margin, H - margin):
        for x in range(x_lo, x_hi):
            xp = x + pad
            c = np.int32(P[y, xp])
            lo = c - t
            hi = c + t
            # any 9-arc contains two neighbouring compass points
            v0 = np.int32(P[y - 3, xp])
            v4 = np.int32(P[y, xp + 3])
            v8 = np.int32(P[y + 3, xp])
            v12 = np.int32(P[y, xp - 3])
            nb = (v0 > hi) + (v4 > hi) + (v8 > hi) + (v12 > hi)
            nd = (v0 < lo) + (v4 < lo) + (v8 < lo) + (v12 < lo)
            if nb < 2 and nd < 2:
                continue
            if not ((v0 > hi and v4 > hi) or (v4 > hi and v8 > hi) or (v8 > hi and v12 > hi)
                    or (v12 > hi and v0 > hi) or (v0 < lo and v4 < lo) or (v4 < lo and v8 < lo)
                    or (v8 < lo and v12 < lo) or (v12 < lo and v0 < lo)):
                continue
            for k in range(16):
                vals[k] = np.int32(P[y + circle[k, 1], xp + circle[k, 0]]) - c
            best = 0
            for s in range(16):
                mb = vals[s]
                md = -vals[s]
                for j in range(1, 9):
                    v = vals[(s + j) & 15]
                    if v < mb:
                        mb = v
                    if -v < md:
                        md = -v
                if mb > best:
                    best = mb
                if md > best:
                    best = md
            if best > t:
                out[y, x] = best
    return out


@njit(cache=True)
def _nms(score, wrap):
    H, W = score.shape
    n = 0
    xs = np.empty(H * W, dtype=np.int64)
    ys = np.empty(H * W, dtype=np.int64)
    for y in range(H):
        for x in range(W):
            s = score[y, x]
            if s <= 0:
                continue
            keep = True
            for dy in range(-1, 2):
                yy = y + dy
                if yy < 0 or yy >= H:
                    continue
                for dx in range(-1, 2):
                    xx = x + dx
                    if wrap:
                        xx = (xx + W) % W
                    elif xx < 0 or xx >= W:
                        continue
                    if score[yy, xx] > s:
                        keep = False
            if keep:
                xs[n] = x
                ys[n] = y
                n += 1
    return xs[:n], ys[:n]


@njit(cache=True)
def _sobel(P):
    """Sobel gradients / 8 of a padded float image (rows 0 and H-1 left at 0)."""
    H, Wp = P.shape
    gx = np.zeros((H, Wp))
    gy = np.zeros((H, Wp))
    for y in range(1, H - 1):
        for x in range(1, Wp - 1):
            gx[y, x] = ((P[y - 1, x + 1] + 2.0 * P[y, x + 1] + P[y + 1, x + 1])
                        - (P[y - 1, x - 1] + 2.0 * P[y, x - 1] + P[y + 1, x - 1])) / 8.0
            gy[y, x] = ((P[y + 1, x - 1] + 2.0 * P[y + 1, x] + P[y + 1, x + 1])
                        - (P[y - 1, x - 1] + 2.0 * P[y - 1, x] + P[y - 1, x + 1])) / 8.0
    return gx, gy


@njit(cache=True)
def _harris(gx, gy, xs, ys, k, weights, pad):
    out = np.empty(len(xs))
    for n in range(len(xs)):
        x0, y0 = xs[n] + pad, ys[n]
        a = 0.0
        b = 0.0
        c = 0.0
        for dy in range(-3, 4):
            for dx in range(-3, 4):
                w = weights[dy + 3, dx + 3]
                ix = gx[y0 + dy, x0 + dx]
                iy = gy[y0 + dy, x0 + dx]
                a += w * ix * ix
                b += w * iy * iy
                c += w * ix * iy
        out[n] = a * b - c * c - k * (a + b) * (a + b)
    return out


@njit(cache=True)
def _orientation(P, xs, ys, radius, pad):
    out = np.empty(len(xs))
    r2 = radius * radius
    for n in range(len(xs)):
        m10 = 0
        m01 = 0
        x0 = xs[n] + pad
        for dy in range(-radius, radius + 1):
            y = ys[n] + dy
            for dx in range(-radius, radius + 1):
                if dx * dx + dy * dy > r2:
                    continue
                v = np.int64(P[y, x0 + dx])
                m10 += dx * v
                m01 += dy * v
        if m10 == 0 and m01 == 0:
            out[n] = 0.0
        else:
            a = math.atan2(float(m01), float(m10))
            if a < 0:
                a += 2.0 * math.pi
            if a >= 2.0 * math.pi:
                a = 0.0
            out[n] = a
    return out


@njit(cache=True)
def _describe(S, xs, ys, bins, table, pad):
    n = len(xs)
    out = np.zeros((n, 32), dtype=np.uint8)
    for i in range(n):
        tb = table[bins[i]]
        x0 = xs[i] + pad
        y0 = ys[i]
        for k in range(256):
            if S[y0 + tb[k, 1], x0 + tb[k, 0]] < S[y0 + tb[k, 3], x0 + tb[k, 2]]:
                out[i, k >> 3] |= np.uint8(1 << (k & 7))
    return out


def _harris_weights(sigma=HARRIS_SIGMA):
    d = np.arange(-3, 4)
    return np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2 * sigma * sigma))


# -- public operations ---------------------------------------------------------

def fast_scores(img, threshold=FAST_THRESHOLD, wrap=True, margin=EDGE):
    """Per-pixel FAST-9 score map; nonzero exactly where the segment test passes."""
    if threshold < 1:
        raise ValueError("FAST threshold must be >= 1")
    P = pad_columns(np.asarray(img, dtype=np.uint8))
    return _fast_score_map(P, int(threshold), bool(wrap), int(margin), CIRCLE, PAD)


def detect_fast(img, threshold=FAST_THRESHOLD, wrap=True, margin=EDGE, nms=True):
    """FAST-9 corners as (xs, ys, scores), after 3x3 non-maximum suppression by default.

    A corner survives suppression unless some 8-neighbour has a strictly
    larger score, so equal-score plateaus are kept symmetrically.
    """
    smap = fast_scores(img, threshold, wrap, margin)
    if nms:
        xs, ys = _nms(smap, bool(wrap))
    else:
        ys, xs = np.nonzero(smap)
        xs, ys = xs.astype(np.int64), ys.astype(np.int64)
    return xs, ys, smap[ys, xs].astype(np.float64)


def _check_rows(ys, H, r, what):
    if len(ys) and (ys.min() < r or ys.max() > H - r - 1):
        raise ValueError(f"{what} does not fit vertically")


def harris_score(img, xs, ys, k=HARRIS_K, sigma=HARRIS_SIGMA, gradients=None):
    """Harris response det(M) - k trace(M)^2 over a Gaussian-weighted 7x7 Sobel window.

    Intensities are scaled to [0, 1]; columns wrap.
    """
    xs = np.atleast_1d(np.asarray(xs, dtype=np.int64))
    ys = np.atleast_1d(np.asarray(ys, dtype=np.int64))
    _check_rows(ys, np.shape(img)[0], 4, "Harris window")
    if gradients is None:
        gradients = _sobel(pad_columns(np.asarray(img, dtype=np.float64) / 255.0))
    return _harris(gradients[0], gradients[1], xs, ys, k, _harris_weights(sigma), PAD)


def orientation(img, xs, ys, radius=HALF_PATCH):
    """Intensity-centroid angle in [0, 2pi) over a radius-15 disc (0 when both moments vanish)."""
    xs = np.atleast_1d(np.asarray(xs, dtype=np.int64))
    ys = np.atleast_1d(np.asarray(ys, dtype=np.int64))
    _check_rows(ys, np.shape(img)[0], radius, "orientation patch")
    return _orientation(pad_columns(np.asarray(img, dtype=np.uint8)), xs, ys, radius, PAD)


def angle_bin(angle):
    step = 2 * np.pi / ANGLE_BINS
    return (np.round(np.asarray(angle, dtype=np.float64) / step).astype(np.int64)) % ANGLE_BINS


def describe(img, xs, ys, angles, pattern: BriefPattern, table=None):
    """Steered BRIEF: bit k is set iff I(p_k) < I(q_k) for the pattern pair rotated to the angle.

    ``img`` is used as given (callers smooth it first). Bit k lives in byte
    ``k // 8`` at position ``k % 8``.
    """
    xs = np.atleast_1d(np.asarray(xs, dtype=np.int64))
    ys = np.atleast_1d(np.asarray(ys, dtype=np.int64))
    _check_rows(ys, np.shape(img)[0], HALF_PATCH, "descriptor patch")
    if table is None:
        table = pattern.rotated()
    S = pad_columns(np.asarray(img, dtype=np.float64))
    return _describe(S, xs, ys, angle_bin(angles), table, PAD)


@njit(cache=True)
def _grid_select(cells, order, cap, n_cells):
    """Walk candidates in ``order`` keeping at most ``cap`` per cell."""
    counts = np.zeros(n_cells, dtype=np.int64)
    keep = np.zeros(len(order), dtype=np.bool_)
    for n in range(len(order)):
        c = cells[order[n]]
        if counts[c] < cap:
            counts[c] += 1
            keep[n] = True
    return order[keep]


@dataclass
class OrbExtractor:
    """Feature extraction settings; the pattern's rotation table is built once."""

    n_features: int = 2500
    n_levels: int = N_LEVELS
    scale: float = SCALE_FACTOR
    fast_threshold: int = FAST_THRESHOLD
    grid: tuple = GRID
    grid_factor: float = 2.0
    pattern: BriefPattern = field(default_factory=BriefPattern)
    wrap: bool = True

    def __post_init__(self):
        self._table = self.pattern.rotated()

    @property
    def cell_cap(self):
        return max(1, math.ceil(self.grid_factor * self.n_features / (self.grid[0] * self.grid[1])))

    def candidates(self, img: IntensityImage):
        """All corners on all levels with level-0 positions, Harris scores and 3D points.

        Returns a dict of arrays plus the pyramid; corners without a 3D point
        within reach are already removed.
        """
        try:
            levels = build_pyramid(img, self.n_levels, self.scale)
        except ValueError as exc:
            warnings.warn(f"no features: {exc}")
            return None, []
        H0, W0 = img.H, img.W
        weights = _harris_weights()
        cols = {k: [] for k in ("x", "y", "level", "u", "v", "score")}
        for lv, im in enumerate(levels):
            P = pad_columns(im)
            xs, ys = self._detect(P)
            if not len(xs):
                continue
            h, w = im.shape
            gx, gy = _sobel(P / 255.0)
            cols["x"].append(xs)
            cols["y"].append(ys)
            cols["level"].append(np.full(len(xs), lv))
            cols["u"].append((xs + 0.5) * (W0 / w))
            cols["v"].append((ys + 0.5) * (H0 / h))
            cols["score"].append(_harris(gx, gy, xs, ys, HARRIS_K, weights, PAD))
        if not cols["x"]:
            return None, levels
        cand = {k: np.concatenate(v) for k, v in cols.items()}
        pidx = lookup_points(img, cand["u"], cand["v"])
        ok = pidx >= 0
        cand = {k: v[ok] for k, v in cand.items()}
        cand["point"] = pidx[ok]
        return cand, levels

    def _detect(self, P):
        t = self.fast_threshold
        smap = _fast_score_map(P, t, self.wrap, EDGE, CIRCLE, PAD)
        xs, ys = _nms(smap, self.wrap)
        if len(xs) < FAST_MIN_CORNERS and t > 1:
            smap = _fast_score_map(P, max(1, t // 2), self.wrap, EDGE, CIRCLE, PAD)
            xs, ys = _nms(smap, self.wrap)
        return xs, ys

    def select(self, cand, W0, H0):
        """Indices into ``cand`` kept by the grid cap then the global top-N by score."""
        gw, gh = self.grid
        cu = np.minimum((cand["u"] * gw / W0).astype(np.int64), gw - 1)
        cv = np.minimum((cand["v"] * gh / H0).astype(np.int64), gh - 1)
        cells = cv * gw + cu
        order = np.argsort(-cand["score"], kind="stable")
        kept = _grid_select(cells, order, self.cell_cap, gw * gh)
        return kept[: self.n_features]

    def extract(self, img: IntensityImage) -> FeatureSet:
        cand, levels = self.candidates(img)
        if cand is None:
            return FeatureSet.empty(img.source_id, self.pattern.seed)
        sel = self.select(cand, img.W, img.H)
        c = {k: v[sel] for k, v in cand.items()}
        angle = np.empty(len(sel))
        desc = np.empty((len(sel), 32), dtype=np.uint8)
        for lv in np.unique(c["level"]):
            m = c["level"] == lv
            im = levels[lv]
            angle[m] = _orientation(pad_columns(im), c["x"][m], c["y"][m], HALF_PATCH, PAD)
            S = pad_columns(gaussian_blur(im))
            desc[m] = _describe(S, c["x"][m], c["y"][m], angle_bin(angle[m]), self._table, PAD)
        pts = img.points[c["point"]]
        return FeatureSet(img.source_id, c["u"], c["v"], c["x"], c["y"], c["level"], c["score"],
                          angle, desc, pts, self.pattern.seed)


@njit(cache=True)
def _lookup(point_index, cell_uv, u, v, max_px):
    H, W = point_index.shape
    out = np.full(len(u), -1, dtype=np.int64)
    for n in range(len(u)):
        cu = int(math.floor(u[n])) % W
        cv = int(math.floor(v[n]))
        best = max_px
        for dv in range(-1, 2):
            r = cv + dv
            if r < 0 or r >= H:
                continue
            for du in range(-1, 2):
                c = (cu + du + W) % W
                pid = point_index[r, c]
                if pid < 0:
                    continue
                d_u = (cell_uv[r, c, 0] - u[n] + 0.5 * W) % W - 0.5 * W
                d = math.sqrt(d_u * d_u + (cell_uv[r, c, 1] - v[n]) ** 2)
                if d <= best and (out[n] < 0 or d < best):
                    best = d
                    out[n] = pid
    return out


def lookup_points(img: IntensityImage, u, v, max_px=1.5):
    """Index of the source point for each level-0 position, or -1.

    Searches the containing cell and its 8 neighbours; the candidate whose
    point re-projects closest wins, and only within ``max_px``.
    """
    cell_uv = img.cell_uv
    if cell_uv is None:
        cell_uv = np.full((img.H, img.W, 2), np.nan)
        ok = img.valid
        cu, cv = continuous_coords(img.points[img.point_index[ok], :3], img.W, img.H, img.vfov)
        cell_uv[ok] = np.column_stack([cu % img.W, cv])
    return _lookup(img.point_index, cell_uv, np.asarray(u, dtype=np.float64),
                   np.asarray(v, dtype=np.float64), float(max_px))


def extract(img: IntensityImage, n_bow: int = 2500, pattern: Optional[BriefPattern] = None,
            **kwargs) -> FeatureSet:
    """Extract up to ``n_bow`` ORB features with associated 3D points."""
    ex = OrbExtractor(n_features=n_bow, pattern=pattern or BriefPattern(), **kwargs)
    return ex.extract(img)
