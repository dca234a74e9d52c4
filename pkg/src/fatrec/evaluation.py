"""Top-N metrics, experiment reports and coupling-factor export.

Metrics are computed per user on [0, 1] and averaged; reports scale the
averages by 100. Users without ground truth are skipped.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import TEST, UNKNOWN_CATEGORY, SplitDataset, build_item_user_index
from .inbe import SECONDS_PER_DAY, NeighborSet, extract_all
from .seqmodel import lstm_forward
from .training import Checkpoint, Recommender, TrainConfig, config_dict, make_batch, train
from .trends import route_batch

log = logging.getLogger(__name__)

METRICS = ("recall", "ndcg", "diversity")


class EvaluationError(ValueError):
    pass


def _top(recommended, N: int) -> list[int]:
    rec = [int(x) for x in recommended]
    if N < 1:
        raise ValueError("N must be >= 1")
    if N > len(rec):
        raise ValueError(f"N={N} exceeds the list length {len(rec)}")
    if len(set(rec)) != len(rec):
        raise ValueError("recommended list has duplicates")
    return rec[:N]


def recall_at_n(recommended, ground_truth, N: int) -> float | None:
    """``|top-N & I_u| / |I_u|``; ``None`` when ``I_u`` is empty (user skipped)."""
    truth = set(int(x) for x in ground_truth)
    top = _top(recommended, N)
    if not truth:
        return None
    return sum(1 for r in top if r in truth) / len(truth)


def ndcg_at_n(recommended, ground_truth, N: int) -> float | None:
    """Binary-relevance NDCG with ``1 / log2(rank + 1)`` discounts."""
    truth = set(int(x) for x in ground_truth)
    top = _top(recommended, N)
    if not truth:
        return None
    dcg = sum(1.0 / math.log2(j + 2) for j, r in enumerate(top) if r in truth)
    idcg = sum(1.0 / math.log2(j + 2) for j in range(min(N, len(truth))))
    return dcg / idcg


def diversity_at_n(recommended, categories, N: int) -> float:
    """Fraction of unordered top-N pairs whose categories differ.

    ``categories`` maps an item id to its category (array or dict); missing or
    negative entries fall into one shared "unknown" category with a warning.
    """
    if N < 2:
        raise ValueError("diversity needs N >= 2")
    top = _top(recommended, N)
    cats = []
    unknown = 0
    for r in top:
        try:
            c = categories[r]
        except (KeyError, IndexError):
            c = UNKNOWN_CATEGORY
        if c is None or (isinstance(c, (int, np.integer)) and c < 0):
            c = UNKNOWN_CATEGORY
        if c == UNKNOWN_CATEGORY:
            unknown += 1
        cats.append(c)
    if unknown:
        log.warning("%d of the top-%d items have no category; treated as 'unknown'", unknown, N)
    _, counts = np.unique(np.array([str(c) for c in cats]), return_counts=True)
    same = int(np.sum(counts * (counts - 1) // 2))
    pairs = N * (N - 1) // 2
    return (pairs - same) / pairs


@dataclass
class EvalReport:
    values: dict[tuple[str, int], float]           # (metric, N) -> mean x 100
    users: np.ndarray
    per_user: dict[tuple[str, int], np.ndarray]    # raw [0, 1] values aligned with users
    config: dict = field(default_factory=dict)
    seed: int = 0

    def rows(self) -> list[tuple[str, int, float]]:
        return [(m, n, v) for (m, n), v in sorted(self.values.items(), key=lambda kv: (
            METRICS.index(kv[0][0]), kv[0][1]))]

    def write(self, report_path, per_user_path=None) -> None:
        with open(report_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "N", "value"])
            for m, n, v in self.rows():
                w.writerow([m, n, repr(v)])
        if per_user_path is not None:
            keys = [(m, n) for m, n, _ in self.rows()]
            with open(per_user_path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["user"] + [f"{m}@{n}" for m, n in keys])
                for k, u in enumerate(self.users):
                    w.writerow([int(u)] + [repr(float(self.per_user[key][k])) for key in keys])


def neighbor_sets_for(cfg: TrainConfig, split: SplitDataset) -> list[NeighborSet] | None:
    """Neighbor sets the model was trained with; ``None`` for the Base variant."""
    if cfg.variant != "fat":
        return None
    return extract_all(split, build_item_user_index(split), cfg.K, cfg.max_neighbors,
                       cfg.single_cap, cfg.max_future_len, cfg.exclude_anchor)


def evaluate_model(ck: Checkpoint, split: SplitDataset, Ns=(20, 50), diversity: bool = True,
                   policy: str = "first-of-test", seed: int = 0,
                   sets: list[NeighborSet] | None = None) -> EvalReport:
    """Recall, NDCG (and Diversity when the split has categories) at each N, x100."""
    Ns = sorted(set(int(n) for n in Ns))
    if not Ns:
        raise ValueError("no cutoffs given")
    if diversity and split.catalog.item_category is None:
        raise EvaluationError("diversity requested but the dataset has no item categories")
    if diversity and Ns[0] < 2:
        raise ValueError("diversity needs N >= 2")
    if sets is None:
        sets = neighbor_sets_for(ck.cfg, split)
    model = Recommender(ck.params, ck.cfg, split, sets)
    targets = model.eval_targets(range(split.n_users), TEST, policy, seed)
    if not targets:
        raise EvaluationError("no evaluable users (every test segment is empty)")
    top = model.rank(targets, max(Ns))
    metrics = METRICS if diversity else METRICS[:2]
    per_user = {(m, n): np.zeros(len(targets)) for m in metrics for n in Ns}
    cats = split.catalog.item_category
    for k, (row, t) in enumerate(zip(top, targets)):
        row = row[row >= 0]
        for n in Ns:
            per_user["recall", n][k] = recall_at_n(row, t.ground_truth, n)
            per_user["ndcg", n][k] = ndcg_at_n(row, t.ground_truth, n)
            if diversity:
                per_user["diversity", n][k] = diversity_at_n(row, cats, n)
    values = {key: 100.0 * float(np.mean(v)) for key, v in per_user.items()}
    users = np.array([t.user for t in targets], dtype=np.int64)
    return EvalReport(values, users, per_user, config_dict(ck.cfg), seed)


def compare_variants(split: SplitDataset, seeds, Ns=(20, 50), diversity: bool = True,
                     echo=None, **cfg_kw) -> dict[str, dict[tuple[str, int], list[float]]]:
    """Train and evaluate fat and base once per seed on one split.

    Returns ``{variant: {(metric, N): [value per seed]}}``; both variants share every
    config field except ``variant``.
    """
    out = {}
    for variant in ("fat", "base"):
        per: dict[tuple[str, int], list[float]] = {}
        for seed in seeds:
            cfg = TrainConfig(**dict(cfg_kw, variant=variant, seed=int(seed)))
            sets = neighbor_sets_for(cfg, split)
            res = train(cfg, split, sets)
            ck = Checkpoint(cfg, res.params, split.fingerprint(), split.n_users, split.n_items)
            rep = evaluate_model(ck, split, Ns, diversity, seed=int(seed), sets=sets)
            for k, v in rep.values.items():
                per.setdefault(k, []).append(v)
            if echo is not None:
                echo(variant, int(seed), rep)
        out[variant] = per
    return out


@dataclass
class CouplingRow:
    trend_index: int
    capsule_index: int
    neighbor_id: str
    item_id: str
    timestamp: int
    coupling: float


def export_coupling(ck: Checkpoint, split: SplitDataset, user: int, path=None,
                    sets: list[NeighborSet] | None = None) -> list[CouplingRow]:
    """Coupling factor of every (trend, capsule) pair for one user's routed capsules."""
    if ck.cfg.variant != "fat":
        raise EvaluationError("coupling export needs a fat checkpoint")
    if not 0 <= user < split.n_users:
        raise EvaluationError(f"unknown user {user}")
    if sets is None:
        sets = neighbor_sets_for(ck.cfg, split)
    model = Recommender(ck.params, ck.cfg, split, sets)
    plan = model.plans[user]
    if plan.n_capsules == 0:
        raise EvaluationError(f"user {split.catalog.user_ids[user]} ({user}) has an empty neighbor set")
    hist = split.items_of(user)
    batch = make_batch([hist], [0], [0.0], [user], model.plans, ck.cfg.max_seq_len)
    E = ck.params["item_emb"]
    enc = lstm_forward(E[batch.nseq_ids], ck.params, batch.nseq_mask)
    caps = enc.H.reshape(-1, ck.cfg.d)[batch.cap_src] * batch.cap_mask[..., None]
    rb = route_batch(caps, batch.cap_mask, ck.params["routing"], ck.cfg.routing_iters, batch.cap_day)
    coupling = rb.coupling[0]
    cat = split.catalog
    meta = []
    for (nb, _), items, days, used in zip(plan.keys, plan.items, plan.days, plan.used):
        for k in range(used):
            meta.append((cat.user_ids[nb], cat.item_ids[int(items[k])],
                         int(round(days[k] * SECONDS_PER_DAY))))
    rows = []
    for j in range(coupling.shape[1]):
        for i, (nb, it, ts) in enumerate(meta):
            rows.append(CouplingRow(j, i, nb, it, ts, float(coupling[i, j])))
    if path is not None:
        with open(Path(path), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["trend_index", "capsule_index", "neighbor_id", "item_id", "timestamp",
                        "coupling"])
            for r in rows:
                w.writerow([r.trend_index, r.capsule_index, r.neighbor_id, r.item_id, r.timestamp,
                            repr(r.coupling)])
    return rows
