"""Hierarchical binary vocabulary (k-majority tree) and sparse tf-idf BoW vectors.

Vocabulary file layout (all little-endian)::

    magic      8 bytes  b"LPVOCAB\\0"
    version    u32      currently 1
    k, L       u32, u32
    seed       i64      BRIEF pattern seed the vocabulary was trained with
    n_nodes    u32
    n_words    u32
    n_docs     u64      training documents used for idf
    nodes      n_nodes records of
                 center      32 bytes (bit b in byte b // 8, position b % 8)
                 first_child i32 (-1 for a leaf)
                 n_children  i32
                 word        i32 (-1 for an inner node)
                 weight      f64 (idf of the word, 0 for inner nodes)

Node 0 is the root; the children of a node are stored contiguously. Word ids
are dense and follow node order.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np
from numba import njit

from .matching import pack, popcount64
from .orb import FeatureSet

log = logging.getLogger(__name__)

MAGIC = b"LPVOCAB\0"
VERSION = 1
_HEADER = struct.Struct("<8sIIIqIIQ")
NODE_DTYPE = np.dtype([("center", "u1", 32), ("first_child", "<i4"), ("n_children", "<i4"),
                       ("word", "<i4"), ("weight", "<f8")])


@dataclass
class BowVector:
    """Sparse L1-normalized vector: ascending ``words`` with positive ``weights``."""

    words: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return len(self.words)

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0))

    @classmethod
    def from_dict(cls, d, normalize=True):
        items = sorted((int(w), float(x)) for w, x in d.items() if x > 0)
        if not items:
            return cls.empty()
        words = np.array([w for w, _ in items], dtype=np.int64)
        weights = np.array([x for _, x in items])
        if normalize:
            weights = weights / weights.sum()
        return cls(words, weights)

    def as_dict(self):
        return dict(zip(self.words.tolist(), self.weights.tolist()))


@njit(cache=True)
def _sum_min(wa, xa, wb, xb):
    """Sequential sum of min(a_w, b_w) over common words, in ascending word order."""
    s = 0.0
    i = j = 0
    while i < len(wa) and j < len(wb):
        if wa[i] == wb[j]:
            s += min(xa[i], xb[j])
            i += 1
            j += 1
        elif wa[i] < wb[j]:
            i += 1
        else:
            j += 1
    return s


def similarity(a: BowVector, b: BowVector) -> float:
    """L1 score 1 - |a - b|_1 / 2, in [0, 1]; 0 if either vector is empty.

    For L1-normalized vectors this equals the sum of min(a_w, b_w) over the
    shared words, which is what is computed (and what the database index
    accumulates, so both agree bit for bit).
    """
    if len(a) == 0 or len(b) == 0:
        return 0.0
    return float(min(1.0, _sum_min(a.words, a.weights, b.words, b.weights)))


# -- training -----------------------------------------------------------------

@njit(cache=True)
def _dist(D, a, C, c):
    d = 0
    for w in range(4):
        d += popcount64(D[a, w] ^ C[c, w])
    return d


@njit(cache=True)
def _seed_centers(D, members, k, C):
    """k-means++ style seeding under Hamming distance; stops early once every member is covered."""
    n = len(members)
    first = members[np.random.randint(n)]
    C[0] = D[first]
    nearest = np.empty(n, dtype=np.float64)
    for m in range(n):
        nearest[m] = _dist(D, members[m], C, 0)
    nc = 1
    while nc < k:
        total = 0.0
        for m in range(n):
            total += nearest[m] * nearest[m]
        if total == 0.0:
            break
        r = np.random.random() * total
        pick = n - 1
        acc = 0.0
        for m in range(n):
            acc += nearest[m] * nearest[m]
            if acc > r and nearest[m] > 0:
                pick = m
                break
        while nearest[pick] == 0:
            pick -= 1
        C[nc] = D[members[pick]]
        for m in range(n):
            d = _dist(D, members[m], C, nc)
            if d < nearest[m]:
                nearest[m] = d
        nc += 1
    return nc


@njit(cache=True)
def _assign(D, members, C, nc, out):
    changed = False
    for m in range(len(members)):
        best, bc = 1 << 30, 0
        for c in range(nc):
            d = _dist(D, members[m], C, c)
            if d < best:
                best, bc = d, c
        if out[m] != bc:
            out[m] = bc
            changed = True
    return changed


@njit(cache=True)
def _majority(D, members, assign, nc, C):
    """Per-bit majority of each cluster; ties take the bit of the cluster's first member."""
    counts = np.zeros((nc, 256), dtype=np.int64)
    sizes = np.zeros(nc, dtype=np.int64)
    first = np.full(nc, -1, dtype=np.int64)
    one = np.uint64(1)
    for m in range(len(members)):
        c = assign[m]
        a = members[m]
        sizes[c] += 1
        if first[c] < 0:
            first[c] = a
        for w in range(4):
            x = D[a, w]
            for b in range(64):
                counts[c, w * 64 + b] += (x >> np.uint64(b)) & one
    for c in range(nc):
        if sizes[c] == 0:
            continue
        for w in range(4):
            word = np.uint64(0)
            for b in range(64):
                two = 2 * counts[c, w * 64 + b]
                if two > sizes[c]:
                    bit = True
                elif two < sizes[c]:
                    bit = False
                else:
                    bit = (D[first[c], w] >> np.uint64(b)) & one
                if bit:
                    word |= one << np.uint64(b)
            C[c, w] = word
    return sizes


@njit(cache=True)
def _build_tree(D, k, L, seed, iters, max_nodes):
    """Breadth-first k-majority clustering. Returns node arrays and each descriptor's leaf."""
    np.random.seed(seed)
    n = D.shape[0]
    centers = np.zeros((max_nodes, 4), dtype=np.uint64)
    first_child = np.full(max_nodes, -1, dtype=np.int64)
    n_children = np.zeros(max_nodes, dtype=np.int64)
    depth = np.zeros(max_nodes, dtype=np.int64)
    start = np.zeros(max_nodes, dtype=np.int64)
    stop = np.zeros(max_nodes, dtype=np.int64)
    perm = np.arange(n)
    stop[0] = n
    n_nodes = 1
    n_short = 0
    C = np.zeros((k, 4), dtype=np.uint64)
    head = 0
    while head < n_nodes:
        node = head
        head += 1
        if depth[node] == L:
            continue
        members = perm[start[node]:stop[node]].copy()
        nm = len(members)
        nc = _seed_centers(D, members, k, C)
        assign = np.full(nm, -1, dtype=np.int64)
        _assign(D, members, C, nc, assign)
        sizes = _majority(D, members, assign, nc, C)
        for _ in range(iters - 1):
            if not _assign(D, members, C, nc, assign):
                break
            sizes = _majority(D, members, assign, nc, C)
        # final sizes for the last assignment
        sizes[:] = 0
        for m in range(nm):
            sizes[assign[m]] += 1
        # compact non-empty clusters, keeping seeding order
        remap = np.full(nc, -1, dtype=np.int64)
        kept = 0
        for c in range(nc):
            if sizes[c] > 0:
                remap[c] = kept
                kept += 1
        if kept < k and nm >= k:
            n_short += 1
        first_child[node] = n_nodes
        n_children[node] = kept
        offs = np.zeros(kept + 1, dtype=np.int64)
        for c in range(nc):
            if remap[c] >= 0:
                offs[remap[c] + 1] = sizes[c]
        for c in range(kept):
            offs[c + 1] += offs[c]
        fill = offs[:kept].copy()
        base = start[node]
        for m in range(nm):
            r = remap[assign[m]]
            perm[base + fill[r]] = members[m]
            fill[r] += 1
        for c in range(nc):
            r = remap[c]
            if r < 0:
                continue
            ch = n_nodes + r
            centers[ch] = C[c]
            depth[ch] = depth[node] + 1
            start[ch] = base + offs[r]
            stop[ch] = base + offs[r + 1]
        n_nodes += kept
    leaf_of = np.empty(n, dtype=np.int64)
    for node in range(n_nodes):
        if depth[node] == L:
            for m in range(start[node], stop[node]):
                leaf_of[perm[m]] = node
    return (centers[:n_nodes], first_child[:n_nodes], n_children[:n_nodes], depth[:n_nodes],
            leaf_of, n_short)


@njit(cache=True)
def _descend(D, centers, first_child, n_children, word):
    out = np.empty(D.shape[0], dtype=np.int64)
    for a in range(D.shape[0]):
        node = 0
        while first_child[node] >= 0:
            f = first_child[node]
            best, bc = 1 << 30, f
            for c in range(f, f + n_children[node]):
                d = _dist(D, a, centers, c)
                if d < best:
                    best, bc = d, c
            node = bc
        out[a] = word[node]
    return out


def _max_nodes(n, k, L):
    total, width = 1, 1
    for _ in range(L):
        width = min(width * k, n)
        total += width
    return total


@dataclass
class Vocabulary:
    """Vocabulary tree. ``centers`` are packed (n_nodes, 4) uint64; leaves sit at depth ``L``."""

    k: int
    L: int
    centers: np.ndarray
    first_child: np.ndarray
    n_children: np.ndarray
    word: np.ndarray
    idf: np.ndarray
    pattern_seed: int = 0
    n_docs: int = 0

    @property
    def n_words(self):
        return len(self.idf)

    @property
    def n_nodes(self):
        return len(self.word)

    def leaf_nodes(self):
        return np.flatnonzero(self.word >= 0)

    def quantize(self, descriptors) -> np.ndarray:
        """Word id of each descriptor by greedy nearest-child descent."""
        if len(descriptors) == 0:
            return np.zeros(0, dtype=np.int64)
        return _descend(pack(descriptors), self.centers, self.first_child, self.n_children, self.word)

    def transform(self, features: FeatureSet) -> BowVector:
        if features.pattern_seed != self.pattern_seed:
            raise ValueError(f"features use BRIEF pattern seed {features.pattern_seed}, "
                             f"vocabulary was trained with {self.pattern_seed}")
        return self.transform_descriptors(features.descriptors)

    def transform_descriptors(self, descriptors) -> BowVector:
        """tf-idf weights over the descriptors' words, L1-normalized; zero-weight words dropped."""
        if len(descriptors) == 0:
            return BowVector.empty()
        words, counts = np.unique(self.quantize(descriptors), return_counts=True)
        w = counts / len(descriptors) * self.idf[words]
        keep = w > 0
        words, w = words[keep], w[keep]
        if not len(words):
            return BowVector.empty()
        return BowVector(words.astype(np.int64), w / w.sum())

    # -- persistence ----------------------------------------------------------

    def to_bytes(self) -> bytes:
        nodes = np.zeros(self.n_nodes, dtype=NODE_DTYPE)
        nodes["center"] = np.ascontiguousarray(self.centers).view(np.uint8).reshape(-1, 32)
        nodes["first_child"] = self.first_child
        nodes["n_children"] = self.n_children
        nodes["word"] = self.word
        leaf = self.word >= 0
        nodes["weight"][leaf] = self.idf[self.word[leaf]]
        head = _HEADER.pack(MAGIC, VERSION, self.k, self.L, self.pattern_seed, self.n_nodes,
                            self.n_words, self.n_docs)
        return head + nodes.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Vocabulary":
        if len(data) < _HEADER.size:
            raise ValueError("vocabulary file truncated")
        magic, version, k, L, seed, n_nodes, n_words, n_docs = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ValueError("not a vocabulary file")
        if version != VERSION:
            raise ValueError(f"unsupported vocabulary version {version}")
        body = data[_HEADER.size:]
        if len(body) != n_nodes * NODE_DTYPE.itemsize:
            raise ValueError("vocabulary node table has the wrong size")
        nodes = np.frombuffer(body, dtype=NODE_DTYPE)
        centers = np.ascontiguousarray(nodes["center"]).view(np.uint64).reshape(-1, 4)
        word = nodes["word"].astype(np.int64)
        idf = np.zeros(n_words)
        leaf = word >= 0
        idf[word[leaf]] = nodes["weight"][leaf]
        return cls(k, L, centers.copy(), nodes["first_child"].astype(np.int64),
                   nodes["n_children"].astype(np.int64), word, idf, seed, n_docs)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def train(descriptors, k=10, L=6, seed=0, doc_ids=None, pattern_seed=0, iters=10) -> Vocabulary:
    """Recursive k-majority clustering of binary descriptors.

    ``doc_ids`` assigns each descriptor to a training document for the idf
    weights ln(N_docs / n_docs_with_word); by default each descriptor is its
    own document. Nodes with fewer than ``k`` distinct descriptors get fewer
    children, and every branch is extended down to depth ``L``.
    """
    descriptors = np.asarray(descriptors, dtype=np.uint8)
    if len(descriptors) == 0:
        raise ValueError("cannot train a vocabulary on an empty corpus")
    if k < 2 or L < 1:
        raise ValueError("need k >= 2 and L >= 1")
    D = pack(descriptors)
    n = len(D)
    centers, first_child, n_children, depth, leaf_of, n_short = _build_tree(
        D, int(k), int(L), int(seed), int(iters), _max_nodes(n, k, L))
    if n_short:
        log.info("%d vocabulary nodes kept fewer than %d children", n_short, k)
    word = np.full(len(depth), -1, dtype=np.int64)
    leaves = np.flatnonzero(depth == L)
    word[leaves] = np.arange(len(leaves))
    doc_ids = np.arange(n) if doc_ids is None else np.asarray(doc_ids)
    if len(doc_ids) != n:
        raise ValueError("doc_ids must have one entry per descriptor")
    _, docs = np.unique(doc_ids, return_inverse=True)
    n_docs = int(docs.max()) + 1
    pairs = np.unique(np.column_stack([word[leaf_of], docs]), axis=0)
    n_w = np.bincount(pairs[:, 0], minlength=len(leaves))
    idf = np.log(n_docs / n_w)
    return Vocabulary(int(k), int(L), centers, first_child, n_children, word, idf,
                      int(pattern_seed), n_docs)


def train_from_features(feature_sets, k=10, L=6, seed=0, iters=10) -> Vocabulary:
    """Train with one document per FeatureSet; all sets must share a pattern seed."""
    feature_sets = [f for f in feature_sets if len(f)]
    if not feature_sets:
        raise ValueError("cannot train a vocabulary on an empty corpus")
    seeds = {f.pattern_seed for f in feature_sets}
    if len(seeds) != 1:
        raise ValueError(f"feature sets mix BRIEF pattern seeds {sorted(seeds)}")
    desc = np.concatenate([f.descriptors for f in feature_sets])
    docs = np.concatenate([np.full(len(f), n) for n, f in enumerate(feature_sets)])
    return train(desc, k, L, seed, docs, seeds.pop(), iters)
