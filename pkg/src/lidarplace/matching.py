"""Descriptor matching between a query and a candidate feature set."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .orb import FeatureSet

LAMBDA_FLOOR = 25
N_S = 500

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)


@njit(cache=True)
def popcount64(x):
    x = x - ((x >> np.uint64(1)) & _M1)
    x = (x & _M2) + ((x >> np.uint64(2)) & _M2)
    x = (x + (x >> np.uint64(4))) & _M4
    return (x * _H01) >> np.uint64(56)


@njit(cache=True)
def hamming_packed(a, b):
    d = 0
    for w in range(a.shape[0]):
        d += popcount64(a[w] ^ b[w])
    return d


def pack(desc) -> np.ndarray:
    """View (n, 32) uint8 descriptors as (n, 4) uint64 words."""
    desc = np.ascontiguousarray(desc, dtype=np.uint8)
    if desc.ndim == 1:
        desc = desc[None]
    return desc.view(np.uint64).reshape(len(desc), 4)


def hamming(a, b) -> int:
    """Number of differing bits between two 256-bit descriptors."""
    return int(hamming_packed(pack(a)[0], pack(b)[0]))


@njit(cache=True)
def _nearest(A, B):
    """For each row of A, index of and distance to the nearest row of B (lowest index on ties)."""
    n = A.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.int64)
    for i in range(n):
        best, bj = 1 << 30, -1
        for j in range(B.shape[0]):
            d = 0
            for w in range(4):
                d += popcount64(A[i, w] ^ B[j, w])
            if d < best:
                best, bj = d, j
        idx[i] = bj
        dist[i] = best
    return idx, dist


@dataclass
class MatchSet:
    """Accepted matches, sorted by ascending distance.

    ``i`` indexes the query set, ``j`` the candidate set. ``n_selected`` is the
    number of query features that entered the search, ``n_passed`` how many
    passed the distance test before the one-to-one filter.
    """

    i: np.ndarray
    j: np.ndarray
    distance: np.ndarray
    lambda_h: float
    n_selected: int = 0
    n_passed: int = 0

    def __len__(self):
        return len(self.i)

    @classmethod
    def empty(cls, lambda_h=float(LAMBDA_FLOOR)):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), lambda_h)


def select_top(F: FeatureSet, n_s: int) -> np.ndarray:
    """Indices of the ``n_s`` highest corner scores (stable on ties)."""
    order = np.argsort(-np.asarray(F.score), kind="stable")
    return order[:n_s]


def match(Fi: FeatureSet, Fj: FeatureSet, n_s: int = N_S, lambda_floor: float = LAMBDA_FLOOR) -> MatchSet:
    """Match the top ``n_s`` query features against every candidate feature.

    Keeps matches with distance < max(2 * d_min, lambda_floor), then lets each
    candidate feature be claimed once, by the closest query feature.
    """
    if len(Fi) == 0 or len(Fj) == 0:
        return MatchSet.empty(float(lambda_floor))
    sel = select_top(Fi, n_s)
    nn, dist = _nearest(pack(Fi.descriptors[sel]), pack(Fj.descriptors))
    order = np.argsort(dist, kind="stable")
    sel, nn, dist = sel[order], nn[order], dist[order]
    lam = max(2.0 * dist[0], float(lambda_floor))
    ok = dist < lam
    sel, nn, dist = sel[ok], nn[ok], dist[ok]
    n_passed = len(sel)
    _, first = np.unique(nn, return_index=True)
    first.sort()
    return MatchSet(sel[first], nn[first], dist[first], lam, n_selected=len(order), n_passed=n_passed)
