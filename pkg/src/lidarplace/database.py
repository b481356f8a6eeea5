"""Inverted-index database of BoW vectors with a temporal exclusion window.

Snapshot layout (little-endian)::

    magic b"LPBOWDB\\0", version u32, pattern seed i64, n_entries u64, n_words u64
    entries   n_entries x (timestamp f64, scan_id i64, n_words u64)
    vectors   per entry: n_words x word i64, then n_words x weight f64
    postings  n_words x (word i64, length u64), then per list
              length x entry i64 followed by length x weight f64
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .bow import BowVector

MAGIC = b"LPBOWDB\0"
VERSION = 1
_HEADER = struct.Struct("<8sIqQQ")
_ENTRY = np.dtype([("timestamp", "<f8"), ("scan_id", "<i8"), ("n_words", "<u8")])
_POSTING = np.dtype([("word", "<i8"), ("length", "<u8")])

LAMBDA_BOW = 0.015
EXCLUSION = 30.0


@dataclass
class QueryResult:
    """Matches sorted by descending score (ties: older entry first)."""

    entries: np.ndarray
    scores: np.ndarray
    postings_touched: int = 0

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(zip(self.entries.tolist(), self.scores.tolist()))


@njit(cache=True)
def _accumulate(scores, ids, q, w):
    """scores[ids[n]] += min(q[n], w[n]), strictly in the given order."""
    for n in range(len(ids)):
        scores[ids[n]] += min(q[n], w[n])


@dataclass
class _Posting:
    ids: list = field(default_factory=list)
    weights: list = field(default_factory=list)


class BowDatabase:
    """Entries are numbered 0, 1, ... in insertion order; timestamps never decrease."""

    def __init__(self, pattern_seed: int = 0):
        self.pattern_seed = pattern_seed
        self.vectors: list = []
        self.timestamps: list = []
        self.scan_ids: list = []
        self.index: dict = {}

    def __len__(self):
        return len(self.vectors)

    def n_postings(self) -> int:
        return sum(len(p.ids) for p in self.index.values())

    def posting_length(self, word) -> int:
        p = self.index.get(int(word))
        return 0 if p is None else len(p.ids)

    def insert(self, v: BowVector, timestamp: float, scan_id: int) -> int:
        if self.timestamps and timestamp < self.timestamps[-1]:
            raise ValueError(f"timestamp {timestamp} precedes last inserted {self.timestamps[-1]}")
        entry = len(self.vectors)
        self.vectors.append(v)
        self.timestamps.append(float(timestamp))
        self.scan_ids.append(int(scan_id))
        for w, x in zip(v.words.tolist(), v.weights.tolist()):
            p = self.index.get(w)
            if p is None:
                p = self.index[w] = _Posting()
            p.ids.append(entry)
            p.weights.append(x)
        return entry

    def scores(self, v: BowVector):
        """Similarity of ``v`` to every entry sharing a word with it, via the index.

        Returns (entry ids, scores, postings touched); entries come out ascending.
        """
        ids, q, w = [], [], []
        for word, x in zip(v.words.tolist(), v.weights.tolist()):
            p = self.index.get(word)
            if p is None:
                continue
            ids.extend(p.ids)
            w.extend(p.weights)
            q.extend([x] * len(p.ids))
        touched = len(ids)
        if not touched:
            return np.zeros(0, dtype=np.int64), np.zeros(0), 0
        ids = np.array(ids, dtype=np.int64)
        acc = np.zeros(len(self.vectors))
        _accumulate(acc, ids, np.array(q), np.array(w))
        hit = np.unique(ids)
        return hit, np.minimum(acc[hit], 1.0), touched

    def query(self, v: BowVector, now: float, exclusion: float = EXCLUSION,
              lambda_bow: float = LAMBDA_BOW, max_results: int = 1) -> QueryResult:
        """Entries older than ``now - exclusion`` (strictly) scoring above ``lambda_bow``."""
        hit, s, touched = self.scores(v)
        if len(hit):
            ts = np.asarray(self.timestamps)[hit]
            ok = (now - ts > exclusion) & (s > lambda_bow)
            hit, s = hit[ok], s[ok]
            order = np.lexsort((hit, -s))[:max_results]
            hit, s = hit[order], s[order]
        return QueryResult(hit, s, touched)

    # -- persistence ----------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [_HEADER.pack(MAGIC, VERSION, self.pattern_seed, len(self), len(self.index))]
        ent = np.zeros(len(self), dtype=_ENTRY)
        ent["timestamp"] = self.timestamps
        ent["scan_id"] = self.scan_ids
        ent["n_words"] = [len(v) for v in self.vectors]
        parts.append(ent.tobytes())
        for v in self.vectors:
            parts.append(np.asarray(v.words, dtype="<i8").tobytes())
            parts.append(np.asarray(v.weights, dtype="<f8").tobytes())
        words = sorted(self.index)
        post = np.zeros(len(words), dtype=_POSTING)
        post["word"] = words
        post["length"] = [len(self.index[w].ids) for w in words]
        parts.append(post.tobytes())
        for w in words:
            p = self.index[w]
            parts.append(np.asarray(p.ids, dtype="<i8").tobytes())
            parts.append(np.asarray(p.weights, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "BowDatabase":
        magic, version, seed, n_entries, n_words = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ValueError("not a BoW database snapshot")
        if version != VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        pos = _HEADER.size

        def take(dtype, count):
            nonlocal pos
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
            pos += arr.nbytes
            return arr

        db = cls(seed)
        ent = take(_ENTRY, n_entries)
        for e in ent:
            n = int(e["n_words"])
            words = take("<i8", n).astype(np.int64)
            weights = take("<f8", n).astype(np.float64)
            db.vectors.append(BowVector(words, weights))
            db.timestamps.append(float(e["timestamp"]))
            db.scan_ids.append(int(e["scan_id"]))
        for w, length in take(_POSTING, n_words):
            n = int(length)
            db.index[int(w)] = _Posting(take("<i8", n).tolist(), take("<f8", n).tolist())
        if pos != len(data):
            raise ValueError("trailing bytes in database snapshot")
        return db

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "BowDatabase":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
