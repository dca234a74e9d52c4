"""Implicit neighbor behavior extraction.

For an anchored user, candidate neighbors are the other users who interacted
with one of the user's last K train items. Candidates are scored by Pearson
correlation over co-rated items, mapped into [0, 1], and ranked; users sharing
only a single item are admitted sparingly. Each selected neighbor contributes
the part of their own train history that starts at the anchor item.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .data import TRAIN, ItemUserIndex, SplitDataset

SECONDS_PER_DAY = 86400.0


class TrainRatings:
    """Per-user train ratings over distinct items (duplicate records averaged)."""

    def __init__(self, split: SplitDataset):
        m = split.train_mask()
        u, i, r = split.users[m], split.items[m], split.ratings[m]
        shape = (split.n_users, split.n_items)
        sums = sp.csr_matrix((r, (u, i)), shape=shape)
        cnts = sp.csr_matrix((np.ones_like(r), (u, i)), shape=shape)
        sums.sum_duplicates()
        cnts.sum_duplicates()
        vals = sums.data / cnts.data
        self.mask = sp.csr_matrix((np.ones_like(vals), sums.indices, sums.indptr), shape=shape)
        self.ratings = sp.csr_matrix((vals, sums.indices, sums.indptr), shape=shape)
        n_per_user = np.diff(sums.indptr)
        row_sum = np.add.reduceat(vals, sums.indptr[:-1]) if len(vals) else np.zeros(shape[0])
        row_sum = np.where(n_per_user > 0, row_sum, 0.0)
        self.means = np.divide(row_sum, n_per_user, out=np.zeros(shape[0]), where=n_per_user > 0)
        dev = vals - np.repeat(self.means, n_per_user)
        self.dev = sp.csr_matrix((dev, sums.indices, sums.indptr), shape=shape)
        self.dev_sq = sp.csr_matrix((dev * dev, sums.indices, sums.indptr), shape=shape)
        self.n_items_of = n_per_user

    def user_dict(self, u: int) -> dict[int, float]:
        lo, hi = self.ratings.indptr[u], self.ratings.indptr[u + 1]
        return dict(zip(self.ratings.indices[lo:hi].tolist(), self.ratings.data[lo:hi].tolist()))

    def against(self, u: int, candidates: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Raw similarity and common-item count of ``u`` against each candidate."""
        du = self.dev.getrow(u).toarray().ravel()
        mu = self.mask.getrow(u).toarray().ravel()
        Dc = self.dev[candidates]
        Mc = self.mask[candidates]
        num = Dc @ du
        var_u = Mc @ (du * du)
        var_c = self.dev_sq[candidates] @ mu
        common = np.rint(Mc @ mu).astype(np.int64)
        raw = np.zeros(len(candidates))
        ok = (var_u > 0) & (var_c > 0)
        raw[ok] = num[ok] / (np.sqrt(var_u[ok]) * np.sqrt(var_c[ok]))
        flat = (common > 0) & ~ok
        if flat.any():
            nc = self.n_items_of[candidates[flat]]
            cos = common[flat] / np.sqrt(self.n_items_of[u] * nc)
            raw[flat] = 2.0 * cos - 1.0
        return np.clip(raw, -1.0, 1.0), common


def pcc_similarity(u: int, v: int, ratings: TrainRatings) -> float:
    """Pearson correlation of two users over their co-rated train items.

    Deviations are taken from each user's mean over all of their train items.
    Empty overlap gives 0. If either deviation vector over the overlap is all
    zero (constant ratings, e.g. implicit feedback) the binary cosine
    ``|I(u) & I(v)| / sqrt(|I(u)| |I(v)|)`` is rescaled to ``2 cos - 1``.
    """
    if u == v:
        raise ValueError("similarity of a user with itself")
    ru, rv = ratings.user_dict(u), ratings.user_dict(v)
    common = sorted(set(ru) & set(rv))
    if not common:
        return 0.0
    mu, mv = ratings.means[u], ratings.means[v]
    du = np.array([ru[k] - mu for k in common])
    dv = np.array([rv[k] - mv for k in common])
    su, sv = float(du @ du), float(dv @ dv)
    if su == 0.0 or sv == 0.0:
        cos = len(common) / math.sqrt(len(ru) * len(rv))
        return 2.0 * cos - 1.0
    return float(np.clip(du @ dv / (math.sqrt(su) * math.sqrt(sv)), -1.0, 1.0))


def map_similarity(raw):
    """Map a correlation in [-1, 1] onto [0, 1] via (x + 1) / 2."""
    x = np.asarray(raw, dtype=np.float64)
    if np.any(x < -1.0 - 1e-12) or np.any(x > 1.0 + 1e-12) or np.any(np.isnan(x)):
        raise ValueError(f"similarity outside [-1, 1]: {raw}")
    out = (np.clip(x, -1.0, 1.0) + 1.0) / 2.0
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class NeighborCandidate:
    user: int
    raw: float
    mapped: float
    common: int


@dataclass
class RelativeFutureSequence:
    neighbor: int
    anchor: int
    items: np.ndarray
    times: np.ndarray


@dataclass
class NeighborSet:
    user: int
    anchors: np.ndarray
    neighbors: list[NeighborCandidate] = field(default_factory=list)
    sequences: list[RelativeFutureSequence] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.neighbors)

    @property
    def n_single(self) -> int:
        return sum(1 for c in self.neighbors if c.common == 1)


def single_quota(n_multi: int, n_single: int, max_neighbors: int, single_cap: float) -> int:
    """Largest number of single-common-item neighbors allowed next to ``n_multi`` others.

    The cap is relative to the size of the selected set: ``s <= floor(cap * (m + s))``.
    """
    s = min(n_single, max(0, max_neighbors - n_multi))
    while s > 0 and s > math.floor(single_cap * (n_multi + s) + 1e-9):
        s -= 1
    return s


def rank_candidates(cands: list[NeighborCandidate], max_neighbors: int,
                    single_cap: float = 0.2) -> list[NeighborCandidate]:
    """Multi-common-item candidates first, by mapped similarity then user id; singles appended under the cap."""
    key = lambda c: (-c.mapped, c.user)  # noqa: E731
    multi = sorted((c for c in cands if c.common >= 2), key=key)[:max_neighbors]
    single = sorted((c for c in cands if c.common == 1), key=key)
    return multi + single[:single_quota(len(multi), len(single), max_neighbors, single_cap)]


def relative_future_sequence(neighbor: int, anchor: int, split: SplitDataset,
                             max_future_len: int = 20,
                             exclude_anchor: bool = False) -> RelativeFutureSequence:
    """The neighbor's train interactions from their earliest occurrence of ``anchor`` onward."""
    items = split.items_of(neighbor, TRAIN)
    times = split.times_of(neighbor, TRAIN)
    hits = np.flatnonzero(items == anchor)
    if len(hits) == 0:
        raise ValueError(f"anchor item {anchor} not in train history of user {neighbor}")
    lo = int(hits[0]) + (1 if exclude_anchor else 0)
    hi = lo + max_future_len
    return RelativeFutureSequence(neighbor, anchor, items[lo:hi].copy(), times[lo:hi].copy())


def anchor_items(user: int, split: SplitDataset, K: int) -> np.ndarray:
    """The last ``K`` train items, most recent first."""
    items = split.items_of(user, TRAIN)
    return items[::-1][:K].copy()


def extract_neighbors(user: int, split: SplitDataset, index: ItemUserIndex,
                      ratings: TrainRatings, K: int = 1, max_neighbors: int = 20,
                      single_cap: float = 0.2, max_future_len: int = 20,
                      exclude_anchor: bool = False) -> NeighborSet:
    anchors = anchor_items(user, split, K)
    ns = NeighborSet(user, anchors)
    pools = [index[a] for a in np.unique(anchors)]
    if not pools:
        return ns
    cand = np.unique(np.concatenate(pools))
    cand = cand[cand != user]
    if len(cand) == 0:
        return ns
    raw, common = ratings.against(user, cand)
    mapped = map_similarity(raw)
    cands = [NeighborCandidate(int(c), float(r), float(m), int(k))
             for c, r, m, k in zip(cand, raw, mapped, common)]
    ns.neighbors = rank_candidates(cands, max_neighbors, single_cap)
    for nb in ns.neighbors:
        for a in anchors:
            if np.any(split.items_of(nb.user, TRAIN) == a):
                seq = relative_future_sequence(nb.user, int(a), split, max_future_len,
                                               exclude_anchor)
                if len(seq.items):
                    ns.sequences.append(seq)
    return ns


def extract_all(split: SplitDataset, index: ItemUserIndex, K: int = 1, max_neighbors: int = 20,
                single_cap: float = 0.2, max_future_len: int = 20,
                exclude_anchor: bool = False) -> list[NeighborSet]:
    ratings = TrainRatings(split)
    out = []
    for u in range(split.n_users):
        if len(split.items_of(u, TRAIN)) == 0:
            out.append(NeighborSet(u, np.zeros(0, np.int64)))
            continue
        out.append(extract_neighbors(u, split, index, ratings, K, max_neighbors, single_cap,
                                     max_future_len, exclude_anchor))
    return out


def write_neighbor_tsv(sets: list[NeighborSet], path) -> None:
    """Debug dump: one row per (user, neighbor)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["user", "neighbor", "raw_pcc", "mapped", "common_count"])
        for ns in sets:
            for c in ns.neighbors:
                w.writerow([ns.user, c.user, repr(c.raw), repr(c.mapped), c.common])
