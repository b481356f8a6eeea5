"""Cylindrical intensity images with a pixel -> source point back-reference."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from numba import njit

from .cloud_io import Point3I, Scan

LOW_PERCENTILE = 1.0
HIGH_PERCENTILE = 99.0


@dataclass
class IntensityImage:
    """8-bit intensity image, indexed ``pixels[row, col]``.

    ``point_index[row, col]`` is the index of the winning point in ``points``
    or -1 for an empty cell. Pixel value 0 is reserved for empty cells.
    ``cell_uv[row, col]`` holds the continuous pixel position of that point
    (NaN when empty).
    """

    pixels: np.ndarray
    point_index: np.ndarray
    points: np.ndarray
    vfov: float
    source_id: int = 0
    timestamp: float = 0.0
    cell_uv: Optional[np.ndarray] = None

    @property
    def W(self) -> int:
        return self.pixels.shape[1]

    @property
    def H(self) -> int:
        return self.pixels.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return self.point_index >= 0

    def cell_points(self) -> np.ndarray:
        """(H, W, 3) xyz of each cell's point, NaN where empty."""
        out = np.full((self.H, self.W, 3), np.nan)
        ok = self.valid
        out[ok] = self.points[self.point_index[ok], :3]
        return out


def continuous_coords(xyz, W, H, vfov):
    """Continuous (u, v) pixel coordinates; pixel ``(c, r)`` spans ``[c, c+1) x [r, r+1)``."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    u = W * (np.arctan2(xyz[:, 1], xyz[:, 0]) + np.pi) / (2 * np.pi)
    elev = np.degrees(np.arctan2(xyz[:, 2], np.hypot(xyz[:, 0], xyz[:, 1])))
    v = H * (0.5 * vfov - elev) / vfov
    return u, v


def pixel_coords(xyz, W, H, vfov):
    """Integer (col, row) of points under the cylindrical map; rows may fall outside [0, H)."""
    u, v = continuous_coords(xyz, W, H, vfov)
    return np.floor(u).astype(np.int64) % W, np.floor(v).astype(np.int64)


@njit(cache=True)
def _pick_nearest(cells, idx, rng, pts, n_cells):
    """Per cell, the point with the smallest (range, intensity, x, y, z)."""
    best = np.full(n_cells, -1, dtype=np.int64)
    best_k = np.full(n_cells, -1, dtype=np.int64)
    for k in range(len(cells)):
        c = cells[k]
        b = best_k[c]
        take = b < 0
        if not take:
            if rng[k] != rng[b]:
                take = rng[k] < rng[b]
            else:
                i, j = idx[k], idx[b]
                for f in (3, 0, 1, 2):
                    if pts[i, f] != pts[j, f]:
                        take = pts[i, f] < pts[j, f]
                        break
        if take:
            best_k[c] = k
            best[c] = idx[k]
    return best, best_k


def normalize(raw, valid=None, bounds=None) -> np.ndarray:
    """Scale raw intensities into uint8.

    ``valid`` marks occupied cells (default: ``raw > 0``). Valid values are
    clamped to ``bounds`` (default: 1st/99th percentile of the valid values)
    and mapped linearly onto 0..255, rounding half up. When an explicit
    ``valid`` mask is given, a valid cell that would round to 0 is stored as 1
    so that 0 keeps meaning "no return".
    """
    raw = np.asarray(raw, dtype=np.float64)
    explicit = valid is not None
    valid = raw > 0 if valid is None else np.asarray(valid, dtype=bool)
    out = np.zeros(raw.shape, dtype=np.uint8)
    if not valid.any():
        return out
    vals = raw[valid]
    if bounds is None:
        lo, hi = np.percentile(vals, [LOW_PERCENTILE, HIGH_PERCENTILE])
    else:
        lo, hi = bounds
    if hi > lo:
        scaled = (np.clip(vals, lo, hi) - lo) / (hi - lo) * 255.0
        q = np.floor(scaled + 0.5)
    else:
        q = np.full(vals.shape, 255.0)
    if explicit:
        q = np.maximum(q, 1.0)
    out[valid] = np.clip(q, 0, 255).astype(np.uint8)
    return out


def project(scan: Scan, W: int = 1024, H: int = 128, vfov: float = 45.0) -> IntensityImage:
    """Project ``scan`` onto a W x H cylindrical grid; the nearest point wins each cell."""
    if W < 8 or H < 8:
        raise ValueError(f"image must be at least 8x8, got {W}x{H}")
    if vfov <= 0:
        raise ValueError("vfov must be positive")
    pts = scan.points
    if len(pts) == 0:
        raise ValueError("cannot project an empty scan")
    u, v = continuous_coords(pts[:, :3], W, H, vfov)
    col = np.floor(u).astype(np.int64) % W
    row = np.floor(v).astype(np.int64)
    inside = (row >= 0) & (row < H)
    if not inside.any():
        raise ValueError("empty projection: no point inside the vertical field of view")
    idx = np.flatnonzero(inside)
    rng = np.sqrt(np.einsum("ij,ij->i", pts[idx, :3], pts[idx, :3]))
    cells = row[idx] * W + col[idx]
    point_index, k = _pick_nearest(cells, idx, rng, pts, H * W)
    point_index = point_index.reshape(H, W)
    valid = point_index >= 0
    cell_uv = np.full((H * W, 2), np.nan)
    have = k >= 0
    cell_uv[have, 0] = u[idx[k[have]]] % W
    cell_uv[have, 1] = v[idx[k[have]]]
    raw = np.zeros((H, W))
    raw[valid] = pts[point_index[valid], 3]
    pixels = normalize(raw, valid)
    return IntensityImage(pixels, point_index, pts, float(vfov), scan.id, scan.timestamp,
                          cell_uv.reshape(H, W, 2))


def downsample_rows(img: IntensityImage, target_H: int) -> IntensityImage:
    """Keep every (H / target_H)-th row, emulating a sensor with fewer channels."""
    if target_H <= 0 or img.H % target_H:
        raise ValueError(f"target height {target_H} does not divide image height {img.H}")
    step = img.H // target_H
    cell_uv = None
    if img.cell_uv is not None:
        cell_uv = img.cell_uv[::step].copy()
        cell_uv[..., 1] /= step
    return replace(img, pixels=img.pixels[::step].copy(), point_index=img.point_index[::step].copy(),
                   cell_uv=cell_uv)


def pixel_point(img: IntensityImage, u: int, v: int) -> Optional[Point3I]:
    """The point stored at column ``u``, row ``v``, or None for an empty cell."""
    if not (0 <= u < img.W and 0 <= v < img.H):
        raise IndexError(f"pixel ({u}, {v}) outside {img.W}x{img.H} image")
    k = img.point_index[v, u]
    if k < 0:
        return None
    return Point3I(*map(float, img.points[k]))


def write_pgm(img: IntensityImage, path):
    """Dump the pixel bytes as binary PGM (P5)."""
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.W} {img.H}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img.pixels, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w)
