"""Training loop, checkpoints and top-N retrieval for the FAT and Base variants."""
from __future__ import annotations

import io
import logging
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from .data import (TEST, TRAIN, VALID, EvalTarget, SplitDataset, build_training_samples,
                   select_eval_target)
from .fusion import PARAM_ORDER, Batch, loss_and_grads, user_forward
from .inbe import SECONDS_PER_DAY, NeighborSet
from .numerics import AdamConfig, AdamState, adam_step, uniform_init
from .seqmodel import init_lstm
from .trends import init_transforms

log = logging.getLogger(__name__)

CKPT_MAGIC = b"FATM"
CKPT_VERSION = 1
VARIANTS = ("fat", "base")
POLICIES = ("first-of-test", "seeded-random")


class TrainingDiverged(RuntimeError):
    pass


class CheckpointMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    d: int = 64
    T: int = 6
    K: int = 1
    max_neighbors: int = 20
    max_future_len: int = 20
    max_seq_len: int = 50
    routing_iters: int = 3
    alpha: float = 1.0
    learn_alpha: bool = False
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 10
    negatives: int = 0
    seed: int = 0
    variant: str = "fat"
    max_capsules: int = 256
    single_cap: float = 0.2
    exclude_anchor: bool = False
    forget_bias: float = 0.0
    val_max_users: int = 0
    user_batching: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        for name in ("d", "T", "K", "max_neighbors", "max_future_len", "max_seq_len",
                     "routing_iters", "batch_size", "epochs", "max_capsules"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.negatives < 0 or self.val_max_users < 0:
            raise ValueError("negatives and val_max_users must be >= 0")
        if not 0 <= self.single_cap <= 1:
            raise ValueError("single_cap must be in [0, 1]")


def _field_code(cfg: TrainConfig, name: str):
    v = getattr(cfg, name)
    if name == "variant":
        return "q", VARIANTS.index(v)
    if isinstance(v, bool):
        return "q", int(v)
    if isinstance(v, int):
        return "q", v
    return "d", float(v)


def init_params(cfg: TrainConfig, n_items: int) -> dict[str, np.ndarray]:
    """Every tensor is drawn in a fixed order so both variants share an initialization."""
    rng = np.random.default_rng(cfg.seed)
    d = cfg.d
    p = {"item_emb": uniform_init(rng, (n_items, d), 1.0 / math.sqrt(d))}
    p.update(init_lstm(rng, d, cfg.forget_bias))
    p["routing"] = init_transforms(rng, cfg.T, d)
    p["alpha"] = np.array([cfg.alpha])
    p["proj"] = uniform_init(rng, (d, 2 * d), 1.0 / math.sqrt(2 * d))
    return {k: p[k] for k in PARAM_ORDER}


@dataclass
class CapsulePlan:
    """Future sequences feeding one user's capsules, in neighbor rank order.

    ``keys[k]`` identifies the (neighbor, anchor) sequence, ``used[k]`` how many
    of its leading positions are capsules (the capsule budget may cut the last one).
    """

    keys: list[tuple[int, int]]
    items: list[np.ndarray]
    days: list[np.ndarray]
    used: list[int]

    @property
    def n_capsules(self) -> int:
        return sum(self.used)


def build_plans(sets: list[NeighborSet] | None, n_users: int, max_capsules: int) -> list[CapsulePlan]:
    plans = []
    for u in range(n_users):
        plan = CapsulePlan([], [], [], [])
        ns = sets[u] if sets is not None else None
        budget = max_capsules
        for seq in (ns.sequences if ns is not None else []):
            if budget <= 0:
                break
            k = min(len(seq.items), budget)
            plan.keys.append((seq.neighbor, seq.anchor))
            plan.items.append(seq.items)
            plan.days.append(seq.times / SECONDS_PER_DAY)
            plan.used.append(k)
            budget -= k
        plans.append(plan)
    return plans


def make_batch(histories: list[np.ndarray], targets, target_days, users,
               plans: list[CapsulePlan] | None, max_seq_len: int) -> Batch:
    ids = np.zeros((len(histories), max(1, min(max_seq_len, max(len(h) for h in histories)))),
                   dtype=np.int64)
    mask = np.zeros(ids.shape, dtype=np.uint8)
    L = ids.shape[1]
    for b, h in enumerate(histories):
        h = h[-L:]
        ids[b, :len(h)] = h
        mask[b, :len(h)] = 1
    slot = -np.ones(len(histories), dtype=np.int64)
    batch = Batch(ids, mask, np.asarray(targets, dtype=np.int64),
                  np.asarray(target_days, dtype=np.float64), slot)
    if plans is None:
        return batch
    slot_of: dict[int, int] = {}
    routed = []
    for b, u in enumerate(users):
        u = int(u)
        if plans[u].n_capsules == 0:
            continue
        if u not in slot_of:
            slot_of[u] = len(routed)
            routed.append(u)
        slot[b] = slot_of[u]
    if not routed:
        return batch
    row_of: dict[tuple[int, int], int] = {}
    rows: list[np.ndarray] = []
    srcs, days = [], []
    for u in routed:
        plan = plans[u]
        src, dd = [], []
        for key, items, dys, k in zip(plan.keys, plan.items, plan.days, plan.used):
            r = row_of.get(key)
            if r is None:
                r = row_of[key] = len(rows)
                rows.append(items)
            src.append((r, k))
            dd.append(dys[:k])
        srcs.append(src)
        days.append(np.concatenate(dd))
    Lf = max(len(r) for r in rows)
    nseq = np.zeros((len(rows), Lf), dtype=np.int64)
    nmask = np.zeros((len(rows), Lf), dtype=np.uint8)
    for r, items in enumerate(rows):
        nseq[r, :len(items)] = items
        nmask[r, :len(items)] = 1
    nmax = max(len(d) for d in days)
    cap_src = np.zeros((len(routed), nmax), dtype=np.int64)
    cap_mask = np.zeros((len(routed), nmax), dtype=np.uint8)
    cap_day = np.zeros((len(routed), nmax))
    for s, (src, dd) in enumerate(zip(srcs, days)):
        flat = np.concatenate([r * Lf + np.arange(k) for r, k in src])
        cap_src[s, :len(flat)] = flat
        cap_mask[s, :len(flat)] = 1
        cap_day[s, :len(flat)] = dd
    batch.nseq_ids, batch.nseq_mask = nseq, nmask
    batch.cap_src, batch.cap_mask, batch.cap_day = cap_src, cap_mask, cap_day
    return batch


class Recommender:
    """Scores and ranks items for users of a prepared split with trained parameters."""

    def __init__(self, params, cfg: TrainConfig, split: SplitDataset,
                 sets: list[NeighborSet] | None = None):
        self.params = params
        self.cfg = cfg
        self.split = split
        self.sets = sets
        use = cfg.variant == "fat" and sets is not None
        self.plans = build_plans(sets, split.n_users, cfg.max_capsules) if use else None

    def eval_targets(self, users, holdout: int = TEST, policy: str = "first-of-test", seed: int = 0):
        out = []
        for u in users:
            t = select_eval_target(int(u), self.split, policy, seed, holdout)
            if t is not None:
                out.append(t)
        return out

    def user_vectors(self, targets) -> np.ndarray:
        """Fused user vectors for a list of :class:`~fatrec.data.EvalTarget`."""
        out = np.zeros((len(targets), self.cfg.d))
        bs = self.cfg.batch_size
        for lo in range(0, len(targets), bs):
            chunk = targets[lo:lo + bs]
            batch = make_batch([t.history for t in chunk], [t.target for t in chunk],
                               [t.target_time / SECONDS_PER_DAY for t in chunk],
                               [t.user for t in chunk], self.plans, self.cfg.max_seq_len)
            c = user_forward(self.params, batch, self.cfg.routing_iters, self.plans is not None)
            out[lo:lo + len(chunk)] = c.eu
        return out

    def rank(self, targets, N: int) -> np.ndarray:
        """Top-N item ids per target row; history items excluded, ties by ascending id."""
        vecs = self.user_vectors(targets)
        E = self.params["item_emb"]
        n_items = E.shape[0]
        out = np.full((len(targets), N), -1, dtype=np.int64)
        ids = np.arange(n_items)
        for r, (t, v) in enumerate(zip(targets, vecs)):
            scores = E @ v
            keep = np.ones(n_items, dtype=bool)
            keep[t.history] = False
            cand = ids[keep]
            order = np.lexsort((cand, -scores[keep]))[:N]
            out[r, :len(order)] = cand[order]
        return out

    def recommend(self, user: int, N: int, policy: str = "first-of-test", seed: int = 0) -> np.ndarray:
        if not 0 <= user < self.split.n_users:
            raise ValueError(f"unknown user {user}")
        t = self.eval_targets([user], TEST, policy, seed)
        if not t:
            # no test segment: rank from the full history
            hist = np.concatenate([self.split.items_of(user, c) for c in (TRAIN, VALID)])
            times = np.concatenate([self.split.times_of(user, c) for c in (TRAIN, VALID)])
            t = [EvalTarget(user, hist, times, -1, int(times[-1]) if len(times) else 0, frozenset())]
        row = self.rank(t, N)[0]
        return row[row >= 0]


def recommend_topn(user: int, model: Recommender, N: int) -> np.ndarray:
    return model.recommend(user, N)


def validation_recall(model: Recommender, N: int = 50, max_users: int = 0) -> float:
    users = np.arange(model.split.n_users)
    if max_users and max_users < len(users):
        users = users[:max_users]
    targets = model.eval_targets(users, VALID)
    if not targets:
        return float("nan")
    top = model.rank(targets, N)
    hits = [len(set(row.tolist()) & t.ground_truth) / len(t.ground_truth) for row, t in zip(top, targets)]
    return float(np.mean(hits))


@dataclass
class TrainResult:
    params: dict
    history: list[tuple[int, float, float]]
    best_epoch: int


def train(cfg: TrainConfig, split: SplitDataset, sets: list[NeighborSet] | None = None,
          log_file: TextIO | None = None,
          on_epoch: Callable[[int, float, float], None] | None = None) -> TrainResult:
    """Mini-batch Adam over prefix samples; keeps the parameters with the best validation Recall@50."""
    params = init_params(cfg, split.n_items)
    rng = np.random.default_rng([cfg.seed, 1])
    samples = build_training_samples(split, cfg.max_seq_len)
    if len(samples) == 0:
        raise ValueError("no training samples (every train segment has < 2 items)")
    use_trends = cfg.variant == "fat" and sets is not None
    plans = build_plans(sets, split.n_users, cfg.max_capsules) if use_trends else None
    seqs = [split.items_of(u, TRAIN) for u in range(split.n_users)]
    times = [split.times_of(u, TRAIN) for u in range(split.n_users)]
    state = AdamState()
    hyper = AdamConfig(lr=cfg.lr)
    skip = frozenset() if cfg.learn_alpha else frozenset({"alpha"})
    best, best_val, best_epoch = None, -1.0, 0
    history = []
    by_user = np.split(np.arange(len(samples)), np.flatnonzero(np.diff(samples.users)) + 1)
    for epoch in range(1, cfg.epochs + 1):
        if cfg.user_batching:
            # users in random order, each user's samples shuffled and kept together,
            # so a batch routes the trends of only a handful of users
            order = np.concatenate([rng.permutation(by_user[k]) for k in rng.permutation(len(by_user))])
        else:
            order = rng.permutation(len(samples))
        total, count = 0.0, 0
        for bno, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            us, ks = samples.users[idx], samples.positions[idx]
            hist = [seqs[u][max(0, k - cfg.max_seq_len):k] for u, k in zip(us, ks)]
            tg = np.array([seqs[u][k] for u, k in zip(us, ks)])
            td = np.array([times[u][k] for u, k in zip(us, ks)]) / SECONDS_PER_DAY
            batch = make_batch(hist, tg, td, us, plans, cfg.max_seq_len)
            scored = None
            if cfg.negatives:
                neg = rng.choice(split.n_items, size=min(cfg.negatives, split.n_items), replace=False)
                scored = np.union1d(tg, neg)
            loss, grads = loss_and_grads(params, batch, cfg.routing_iters, scored, use_trends)
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingDiverged(f"non-finite loss or gradient at epoch {epoch}, batch {bno}")
            adam_step(params, grads, state, hyper, skip)
            total += loss * len(idx)
            count += len(idx)
        model = Recommender(params, cfg, split, sets if use_trends else None)
        val = validation_recall(model, 50, cfg.val_max_users)
        mean_loss = total / count
        history.append((epoch, mean_loss, val))
        if log_file is not None:
            log_file.write(f"{epoch}\t{mean_loss!r}\t{val!r}\n")
            log_file.flush()
        if on_epoch is not None:
            on_epoch(epoch, mean_loss, val)
        log.info("epoch %d loss %.5f val_recall@50 %.5f", epoch, mean_loss, val)
        if val > best_val:
            best_val, best_epoch = val, epoch
            best = {k: v.copy() for k, v in params.items()}
    return TrainResult(best, history, best_epoch)


# checkpoint file -------------------------------------------------------------

@dataclass
class Checkpoint:
    cfg: TrainConfig
    params: dict
    dataset_fingerprint: int
    n_users: int
    n_items: int


def write_checkpoint(path, ck: Checkpoint) -> None:
    """``FATM``, version byte, config fields (declared order, <q or <d), dataset echo, tensors.

    Dataset echo: fingerprint, n_users, n_items (<q each). Tensors follow
    ``PARAM_ORDER``: ndim (<q), dims (<q each), little-endian float64 values.
    """
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<B", CKPT_VERSION))
    for f in fields(TrainConfig):
        code, v = _field_code(ck.cfg, f.name)
        buf.write(struct.pack("<" + code, v))
    buf.write(struct.pack("<3q", ck.dataset_fingerprint, ck.n_users, ck.n_items))
    for name in PARAM_ORDER:
        a = np.asarray(ck.params[name], dtype="<f8")
        buf.write(struct.pack("<q", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}q", *a.shape))
        buf.write(a.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    if data[4] != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {data[4]}")
    pos = 5
    kw = {}
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        code, _ = _field_code(defaults, f.name)
        (v,) = struct.unpack_from("<" + code, data, pos)
        pos += 8
        if f.name == "variant":
            v = VARIANTS[v]
        elif isinstance(getattr(defaults, f.name), bool):
            v = bool(v)
        kw[f.name] = v
    fp, n_users, n_items = struct.unpack_from("<3q", data, pos)
    pos += 24
    params = {}
    for name in PARAM_ORDER:
        (ndim,) = struct.unpack_from("<q", data, pos)
        pos += 8
        shape = struct.unpack_from(f"<{ndim}q", data, pos)
        pos += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(
            np.float64).reshape(shape)
        pos += 8 * count
    return Checkpoint(TrainConfig(**kw), params, fp, n_users, n_items)


def check_compatible(ck: Checkpoint, split: SplitDataset) -> None:
    diffs = []
    if ck.dataset_fingerprint != split.fingerprint():
        diffs.append("dataset_fingerprint")
    if ck.n_users != split.n_users:
        diffs.append(f"n_users ({ck.n_users} vs {split.n_users})")
    if ck.n_items != split.n_items:
        diffs.append(f"n_items ({ck.n_items} vs {split.n_items})")
    if diffs:
        raise CheckpointMismatch("checkpoint does not match dataset: " + ", ".join(diffs))


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
