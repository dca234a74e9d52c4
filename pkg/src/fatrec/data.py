"""Interaction logs: parsing, sparsity filtering, chronological splitting, samples.

A log is columnar (numpy arrays of user, item, rating, timestamp) with dense
integer ids; the :class:`Catalog` maps them back to the external strings.
"""
from __future__ import annotations

import hashlib
import io
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

log = logging.getLogger(__name__)

TRAIN, VALID, TEST = 0, 1, 2
UNKNOWN_CATEGORY = -1

CACHE_MAGIC = b"FATD"
CACHE_VERSION = 1


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass
class Catalog:
    user_ids: list[str]
    item_ids: list[str]
    item_category: np.ndarray | None = None  # int64 per item, -1 = unknown
    category_names: list[str] = field(default_factory=list)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def item_index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.item_ids)}

    def user_index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.user_ids)}


@dataclass
class InteractionLog:
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    catalog: Catalog

    def __len__(self) -> int:
        return len(self.users)

    def sequence(self, user: int) -> np.ndarray:
        """Items of ``user`` in log order (chronological after :func:`ingest`)."""
        return self.items[self.users == user]


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def _parse_lines(text: str, fmt: str):
    users, items, ratings, stamps = [], [], [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if fmt == "movielens-dat":
            parts = line.split("::")
        elif fmt == "tsv":
            parts = line.split("\t") if "\t" in line else line.split()
        else:
            raise ValueError(f"unknown format {fmt!r}")
        if len(parts) < 4:
            raise DataError(f"line {lineno}: expected 4 fields, got {len(parts)}")
        if fmt == "tsv" and not users and not (_is_number(parts[2]) and _is_number(parts[3])):
            # header row; ids may be non-numeric so the numeric columns decide
            continue
        try:
            rating = float(parts[2])
            ts = int(float(parts[3]))
        except ValueError:
            raise DataError(f"line {lineno}: non-numeric rating or timestamp: {raw!r}") from None
        if ts < 0 or not math.isfinite(rating):
            raise DataError(f"line {lineno}: invalid rating or negative timestamp: {raw!r}")
        users.append(parts[0].strip())
        items.append(parts[1].strip())
        ratings.append(rating)
        stamps.append(ts)
    return users, items, ratings, stamps


def _densify(keys: list[str]) -> tuple[np.ndarray, list[str]]:
    index: dict[str, int] = {}
    out = np.empty(len(keys), dtype=np.int64)
    for k, key in enumerate(keys):
        out[k] = index.setdefault(key, len(index))
    return out, list(index)


def _sort_chrono(users, items, ratings, stamps):
    order = np.lexsort((np.arange(len(users)), stamps, users))
    return users[order], items[order], ratings[order], stamps[order]


def ingest(path, fmt: str = "tsv", encoding: str = "utf-8") -> InteractionLog:
    """Parse a ``tsv`` or ``movielens-dat`` file into a chronologically sorted log.

    Per-user order is (timestamp, input order). Duplicate rows are kept.
    """
    if fmt == "movielens-dat" and encoding == "utf-8":
        encoding = "latin-1"
    text = Path(path).read_text(encoding=encoding)
    users, items, ratings, stamps = _parse_lines(text, fmt)
    if not users:
        raise DataError(f"{path}: no interaction records")
    u, user_ids = _densify(users)
    i, item_ids = _densify(items)
    r = np.asarray(ratings, dtype=np.float64)
    t = np.asarray(stamps, dtype=np.int64)
    u, i, r, t = _sort_chrono(u, i, r, t)
    return InteractionLog(u, i, r, t, Catalog(user_ids, item_ids))


def load_categories(path, catalog: Catalog, fmt: str = "tsv") -> Catalog:
    """Attach one category per item.

    ``tsv``: ``item<TAB>category`` rows. ``movielens-dat``: ``movies.dat`` rows
    ``id::title::Genre1|Genre2``, where the first listed genre is used.
    """
    encoding = "latin-1" if fmt == "movielens-dat" else "utf-8"
    names: dict[str, int] = {}
    per_item: dict[str, int] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding=encoding).splitlines(), 1):
        if not raw.strip():
            continue
        if fmt == "movielens-dat":
            parts = raw.split("::")
            if len(parts) < 3:
                raise DataError(f"{path} line {lineno}: expected id::title::genres")
            item, cat = parts[0].strip(), parts[2].split("|")[0].strip()
        else:
            parts = raw.rstrip("\n").split("\t")
            if len(parts) < 2:
                raise DataError(f"{path} line {lineno}: expected item<TAB>category")
            item, cat = parts[0].strip(), parts[1].strip()
        per_item[item] = names.setdefault(cat, len(names))
    cats = np.full(catalog.n_items, UNKNOWN_CATEGORY, dtype=np.int64)
    for k, ext in enumerate(catalog.item_ids):
        if ext in per_item:
            cats[k] = per_item[ext]
    missing = int((cats == UNKNOWN_CATEGORY).sum())
    if missing:
        log.warning("%d items have no category", missing)
    return Catalog(catalog.user_ids, catalog.item_ids, cats, list(names))


def _restrict(lg: InteractionLog, keep: np.ndarray) -> InteractionLog:
    u, i = lg.users[keep], lg.items[keep]
    uu, unew = np.unique(u, return_inverse=True)
    ii, inew = np.unique(i, return_inverse=True)
    cat = lg.catalog
    item_cat = cat.item_category[ii] if cat.item_category is not None else None
    catalog = Catalog(
        [cat.user_ids[k] for k in uu], [cat.item_ids[k] for k in ii], item_cat, cat.category_names
    )
    return InteractionLog(
        unew.astype(np.int64), inew.astype(np.int64), lg.ratings[keep], lg.timestamps[keep], catalog
    )


def filter_sparse(lg: InteractionLog, min_user_records: int, min_item_records: int) -> InteractionLog:
    """Drop users/items below the record thresholds, repeating until nothing changes."""
    if min_user_records < 1 or min_item_records < 1:
        raise ValueError("thresholds must be >= 1")
    keep = np.ones(len(lg), dtype=bool)
    while True:
        uc = np.bincount(lg.users[keep], minlength=lg.catalog.n_users)
        ic = np.bincount(lg.items[keep], minlength=lg.catalog.n_items)
        new = keep & (uc[lg.users] >= min_user_records) & (ic[lg.items] >= min_item_records)
        if new.sum() == keep.sum():
            break
        keep = new
    if not keep.any():
        raise DataError(
            f"filtering with thresholds ({min_user_records}, {min_item_records}) removed every record"
        )
    return _restrict(lg, keep)


def subsample_users(lg: InteractionLog, fraction: float, seed: int) -> InteractionLog:
    """Keep a seeded random fraction of users (desk-scale runs on large logs)."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    rng = np.random.default_rng(seed)
    chosen = rng.random(lg.catalog.n_users) < fraction
    return _restrict(lg, chosen[lg.users])


def split_sizes(n: int) -> tuple[int, int, int]:
    """(train, valid, test) counts for ``n`` interactions; 0.1*n rounded half-up, at least 1."""
    n_test = max(1, math.floor(0.1 * n + 0.5))
    n_valid = n_test
    return n - n_valid - n_test, n_valid, n_test


@dataclass(eq=False)
class SplitDataset:
    """Per-user chronological train/valid/test segments over flat record arrays.

    Records are grouped by user (``offsets[u]:offsets[u+1]``) and ordered
    chronologically; ``segment`` tags each record TRAIN/VALID/TEST.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    segment: np.ndarray
    catalog: Catalog
    thresholds: tuple[int, int] = (1, 1)
    raw_counts: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        n_users = self.catalog.n_users
        self.offsets = np.zeros(n_users + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.users, minlength=n_users), out=self.offsets[1:])
        self._seg = {}
        for code in (TRAIN, VALID, TEST):
            idx = np.flatnonzero(self.segment == code)
            bounds = np.searchsorted(idx, self.offsets)
            self._seg[code] = (idx, bounds)

    @property
    def n_users(self) -> int:
        return self.catalog.n_users

    @property
    def n_items(self) -> int:
        return self.catalog.n_items

    def _rows(self, user: int, code: int) -> np.ndarray:
        idx, bounds = self._seg[code]
        return idx[bounds[user]:bounds[user + 1]]

    def items_of(self, user: int, code: int = TRAIN) -> np.ndarray:
        return self.items[self._rows(user, code)]

    def times_of(self, user: int, code: int = TRAIN) -> np.ndarray:
        return self.timestamps[self._rows(user, code)]

    def ratings_of(self, user: int, code: int = TRAIN) -> np.ndarray:
        return self.ratings[self._rows(user, code)]

    def train_mask(self) -> np.ndarray:
        return self.segment == TRAIN

    def fingerprint(self) -> int:
        h = hashlib.sha256()
        for a in (self.users, self.items, self.ratings, self.timestamps, self.segment):
            h.update(np.ascontiguousarray(a).tobytes())
        return int.from_bytes(h.digest()[:8], "little", signed=True)

    def summary(self) -> dict[str, int]:
        return {
            "users": self.n_users,
            "items": self.n_items,
            "interactions": int(len(self.users)),
            "train": int((self.segment == TRAIN).sum()),
            "valid": int((self.segment == VALID).sum()),
            "test": int((self.segment == TEST).sum()),
            "raw_users": int(self.raw_counts[0]),
            "raw_items": int(self.raw_counts[1]),
            "raw_interactions": int(self.raw_counts[2]),
            "min_user_records": int(self.thresholds[0]),
            "min_item_records": int(self.thresholds[1]),
        }


def chrono_split(lg: InteractionLog, thresholds=(1, 1), raw_counts=(0, 0, 0)) -> SplitDataset:
    """Split every user's chronological sequence 8:1:1 into train/valid/test."""
    users, items, ratings, stamps = _sort_chrono(lg.users, lg.items, lg.ratings, lg.timestamps)
    counts = np.bincount(users, minlength=lg.catalog.n_users)
    segment = np.zeros(len(users), dtype=np.uint8)
    keep_user = np.ones(lg.catalog.n_users, dtype=bool)
    start = 0
    for u, n in enumerate(counts):
        if n == 0:
            keep_user[u] = False
            continue
        n_train, n_valid, n_test = split_sizes(int(n))
        if n_train < 1:
            log.warning("user %s has %d interactions; dropped from split", lg.catalog.user_ids[u], n)
            keep_user[u] = False
        segment[start + n_train:start + n_train + n_valid] = VALID
        segment[start + n_train + n_valid:start + n] = TEST
        start += n
    keep = keep_user[users]
    if not keep.any():
        raise DataError("no user has enough interactions to split")
    if not keep.all():
        old = lg.catalog
        kept_users = np.flatnonzero(keep_user)
        remap = -np.ones(old.n_users, dtype=np.int64)
        remap[kept_users] = np.arange(len(kept_users))
        catalog = Catalog([old.user_ids[k] for k in kept_users], old.item_ids,
                          old.item_category, old.category_names)
        users, items, ratings, stamps, segment = (
            remap[users[keep]], items[keep], ratings[keep], stamps[keep], segment[keep])
    else:
        catalog = lg.catalog
    return SplitDataset(users, items, ratings, stamps, segment, catalog,
                        tuple(thresholds), tuple(raw_counts))


def prepare(path, fmt: str, min_user_records: int, min_item_records: int,
            categories=None, categories_fmt: str = "tsv",
            subsample: float | None = None, seed: int = 0) -> SplitDataset:
    """ingest -> (subsample) -> filter -> categories -> split."""
    lg = ingest(path, fmt)
    raw = (lg.catalog.n_users, lg.catalog.n_items, len(lg))
    if subsample is not None and subsample < 1:
        lg = subsample_users(lg, subsample, seed)
    lg = filter_sparse(lg, min_user_records, min_item_records)
    if categories is not None:
        lg.catalog = load_categories(categories, lg.catalog, categories_fmt)
    return chrono_split(lg, (min_user_records, min_item_records), raw)


@dataclass
class TrainingSamples:
    """Columnar prefix samples: target is ``train[user][pos]``, prefix is everything before it."""

    users: np.ndarray
    positions: np.ndarray
    max_seq_len: int

    def __len__(self) -> int:
        return len(self.users)


@dataclass(frozen=True)
class TrainingSample:
    user: int
    prefix: np.ndarray
    prefix_times: np.ndarray
    target: int
    target_time: int


def build_training_samples(split: SplitDataset, max_seq_len: int = 50) -> TrainingSamples:
    users, positions = [], []
    for u in range(split.n_users):
        m = len(split._rows(u, TRAIN))
        if m >= 2:
            users.append(np.full(m - 1, u, dtype=np.int64))
            positions.append(np.arange(1, m, dtype=np.int64))
    if not users:
        return TrainingSamples(np.zeros(0, np.int64), np.zeros(0, np.int64), max_seq_len)
    return TrainingSamples(np.concatenate(users), np.concatenate(positions), max_seq_len)


def iter_training_samples(split: SplitDataset, samples: TrainingSamples) -> Iterator[TrainingSample]:
    for u, k in zip(samples.users, samples.positions):
        items = split.items_of(int(u))
        times = split.times_of(int(u))
        lo = max(0, k - samples.max_seq_len)
        yield TrainingSample(int(u), items[lo:k], times[lo:k], int(items[k]), int(times[k]))


class ItemUserIndex:
    """Item -> sorted distinct users with a train interaction on it (CSR layout)."""

    def __init__(self, indptr: np.ndarray, indices: np.ndarray):
        self.indptr = indptr
        self.indices = indices

    def __getitem__(self, item: int) -> np.ndarray:
        return self.indices[self.indptr[item]:self.indptr[item + 1]]

    def __len__(self) -> int:
        return len(self.indptr) - 1

    def n_pairs(self) -> int:
        return int(len(self.indices))


def build_item_user_index(split: SplitDataset) -> ItemUserIndex:
    m = split.train_mask()
    pairs = np.unique(np.stack([split.items[m], split.users[m]], axis=1), axis=0)
    counts = np.bincount(pairs[:, 0], minlength=split.n_items) if len(pairs) else np.zeros(
        split.n_items, dtype=np.int64)
    indptr = np.zeros(split.n_items + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return ItemUserIndex(indptr, pairs[:, 1].copy() if len(pairs) else np.zeros(0, np.int64))


@dataclass(frozen=True)
class EvalTarget:
    user: int
    history: np.ndarray
    history_times: np.ndarray
    target: int
    target_time: int
    ground_truth: frozenset


def select_eval_target(user: int, split: SplitDataset, policy: str = "first-of-test",
                       seed: int = 0, holdout: int = TEST) -> EvalTarget | None:
    """History is everything before the held-out segment; ground truth is the whole segment.

    Returns ``None`` when the held-out segment is empty (the user is skipped).
    With ``holdout=VALID`` the history is the train segment only.
    """
    held = split.items_of(user, holdout)
    if len(held) == 0:
        return None
    held_t = split.times_of(user, holdout)
    codes = (TRAIN,) if holdout == VALID else (TRAIN, VALID)
    hist = np.concatenate([split.items_of(user, c) for c in codes])
    hist_t = np.concatenate([split.times_of(user, c) for c in codes])
    if policy == "first-of-test":
        k = 0
    elif policy == "seeded-random":
        k = int(np.random.default_rng([seed, user]).integers(len(held)))
    else:
        raise ValueError(f"unknown eval-target policy {policy!r}")
    return EvalTarget(user, hist, hist_t, int(held[k]), int(held_t[k]),
                      frozenset(int(x) for x in held))


# prepared-dataset cache -------------------------------------------------------

def _put_strings(buf: io.BytesIO, strings: list[str]) -> None:
    buf.write(struct.pack("<q", len(strings)))
    for s in strings:
        b = s.encode("utf-8")
        buf.write(struct.pack("<q", len(b)))
        buf.write(b)


def _get_strings(view: memoryview, pos: int) -> tuple[list[str], int]:
    (n,) = struct.unpack_from("<q", view, pos)
    pos += 8
    out = []
    for _ in range(n):
        (k,) = struct.unpack_from("<q", view, pos)
        pos += 8
        out.append(bytes(view[pos:pos + k]).decode("utf-8"))
        pos += k
    return out, pos


def write_cache(split: SplitDataset, path) -> None:
    """Binary container: ``FATD``, version byte, little-endian int64 header, arrays, vocabularies.

    Header (int64): n_users, n_items, n_records, n_categories, min_user_records,
    min_item_records, raw_users, raw_items, raw_records. Then record arrays
    user(i8) item(i8) rating(f8) timestamp(i8) segment(u1), the item category array
    (i8, n_items, -1 = unknown; present iff n_categories > 0 or categories attached),
    a flag byte for its presence, and three length-prefixed UTF-8 string lists
    (user ids, item ids, category names).
    """
    cat = split.catalog
    buf = io.BytesIO()
    buf.write(CACHE_MAGIC)
    buf.write(struct.pack("<B", CACHE_VERSION))
    n = len(split.users)
    buf.write(struct.pack("<9q", cat.n_users, cat.n_items, n, len(cat.category_names),
                          *split.thresholds, *split.raw_counts))
    buf.write(split.users.astype("<i8").tobytes())
    buf.write(split.items.astype("<i8").tobytes())
    buf.write(split.ratings.astype("<f8").tobytes())
    buf.write(split.timestamps.astype("<i8").tobytes())
    buf.write(split.segment.astype("u1").tobytes())
    has_cat = cat.item_category is not None
    buf.write(struct.pack("<B", int(has_cat)))
    if has_cat:
        buf.write(cat.item_category.astype("<i8").tobytes())
    _put_strings(buf, cat.user_ids)
    _put_strings(buf, cat.item_ids)
    _put_strings(buf, cat.category_names)
    Path(path).write_bytes(buf.getvalue())


def read_cache(path) -> SplitDataset:
    data = Path(path).read_bytes()
    if data[:4] != CACHE_MAGIC:
        raise DataError(f"{path}: not a prepared-dataset cache (bad magic)")
    if data[4] != CACHE_VERSION:
        raise DataError(f"{path}: unsupported cache version {data[4]}")
    view = memoryview(data)
    hdr = struct.unpack_from("<9q", view, 5)
    n_users, n_items, n, n_cat = hdr[:4]
    thresholds, raw = hdr[4:6], hdr[6:9]
    pos = 5 + 9 * 8

    def take(dtype, count):
        nonlocal pos
        arr = np.frombuffer(view, dtype=dtype, count=count, offset=pos).copy()
        pos += arr.nbytes
        return arr

    users = take("<i8", n).astype(np.int64)
    items = take("<i8", n).astype(np.int64)
    ratings = take("<f8", n).astype(np.float64)
    stamps = take("<i8", n).astype(np.int64)
    segment = take("u1", n)
    has_cat = view[pos]
    pos += 1
    item_cat = take("<i8", n_items).astype(np.int64) if has_cat else None
    user_ids, pos = _get_strings(view, pos)
    item_ids, pos = _get_strings(view, pos)
    cat_names, pos = _get_strings(view, pos)
    if len(user_ids) != n_users or len(item_ids) != n_items or len(cat_names) != n_cat:
        raise DataError(f"{path}: vocabulary sizes disagree with header")
    catalog = Catalog(user_ids, item_ids, item_cat, cat_names)
    return SplitDataset(users, items, ratings, stamps, segment, catalog,
                        tuple(thresholds), tuple(raw))
