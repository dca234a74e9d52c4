"""Time-aware trend attention, user fusion, scoring and the training loss.

The forward pass for a batch:

    history ids --LSTM--> h_u
    neighbor futures --LSTM--> capsules --routing--> trends (v_j, T_tr_j)
    attention(target time, T_tr, v) --> HF_u
    e_u = P @ [h_u ; HF_u];  p(i) = softmax_i(e_u . e_i)

:func:`loss_and_grads` returns the mean negative log-likelihood of the targets
with exact gradients for every parameter.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .numerics import softmax
from .seqmodel import lstm_backward, lstm_forward
from .trends import RoutingBatch, route_batch, route_batch_backward

PARAM_ORDER = ("item_emb", "lstm_W", "lstm_bW", "lstm_V", "lstm_bV", "routing", "alpha", "proj")


def attention_weights(target_day: float, trend_days: np.ndarray, alpha: float) -> np.ndarray:
    """Softmax of ``-alpha * ln(1 + |gap in days|)`` over trends."""
    delta = np.abs(target_day - np.asarray(trend_days, dtype=np.float64))
    return softmax(-alpha * np.log1p(delta), axis=-1)


def time_attention(target_day: float, trend_days: np.ndarray, vectors: np.ndarray,
                   alpha: float) -> np.ndarray:
    """Trend summary ``HF_u``; an empty trend set yields ``None`` (caller falls back to zeros)."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.shape[0] == 0:
        return None
    return attention_weights(target_day, trend_days, alpha) @ vectors


def fuse_user(h_u: np.ndarray, hf_u: np.ndarray, proj: np.ndarray) -> np.ndarray:
    h_u = np.asarray(h_u, dtype=np.float64)
    hf_u = np.zeros_like(h_u) if hf_u is None else np.asarray(hf_u, dtype=np.float64)
    if h_u.shape != hf_u.shape or proj.shape != (h_u.shape[-1], 2 * h_u.shape[-1]):
        raise ValueError(
            f"cannot fuse h {h_u.shape} and HF {hf_u.shape} with projection {proj.shape}")
    return np.concatenate([h_u, hf_u], axis=-1) @ proj.T


def predict_scores(e_u: np.ndarray, item_vectors: np.ndarray) -> np.ndarray:
    """Probability over the given item rows: softmax of inner products."""
    item_vectors = np.asarray(item_vectors, dtype=np.float64)
    if item_vectors.shape[0] == 0:
        raise ValueError("no items to score")
    return softmax(item_vectors @ np.asarray(e_u, dtype=np.float64), axis=0)


def scatter_rows(n_rows: int, idx: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Sum ``rows`` into an ``(n_rows, d)`` zero array at row indices ``idx`` (duplicates add)."""
    idx = np.asarray(idx, dtype=np.int64).ravel()
    rows = rows.reshape(len(idx), -1)
    S = sp.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(n_rows, len(idx)))
    return np.asarray(S @ rows)


@dataclass
class Batch:
    """Model inputs for a batch of (history, target) samples.

    ``slot[b]`` indexes the routed capsule set serving sample ``b`` (-1: none).
    Neighbor sequences are rows of ``nseq_ids``; ``cap_src[u, k]`` is the flat
    position ``row * Lf + step`` of capsule ``k`` of set ``u``.
    """

    hist_ids: np.ndarray
    hist_mask: np.ndarray
    target: np.ndarray
    target_day: np.ndarray
    slot: np.ndarray
    nseq_ids: np.ndarray | None = None
    nseq_mask: np.ndarray | None = None
    cap_src: np.ndarray | None = None
    cap_mask: np.ndarray | None = None
    cap_day: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.target)

    @property
    def n_routed(self) -> int:
        return 0 if self.cap_src is None else self.cap_src.shape[0]


@dataclass
class ForwardCache:
    batch: Batch
    enc_h: object
    h: np.ndarray
    hf: np.ndarray
    z: np.ndarray
    eu: np.ndarray
    enc_n: object = None
    rb: RoutingBatch | None = None
    sel: np.ndarray | None = None
    weights: np.ndarray | None = None
    delta: np.ndarray | None = None
    ttr: np.ndarray | None = None


def user_forward(params, batch: Batch, iterations: int, use_trends: bool = True) -> ForwardCache:
    E = params["item_emb"]
    d = E.shape[1]
    enc_h = lstm_forward(E[batch.hist_ids], params, batch.hist_mask)
    h = enc_h.final
    hf = np.zeros_like(h)
    cache = ForwardCache(batch, enc_h, h, hf, None, None)
    if use_trends and batch.n_routed:
        enc_n = lstm_forward(E[batch.nseq_ids], params, batch.nseq_mask)
        flat = enc_n.H.reshape(-1, d)
        caps = flat[batch.cap_src] * batch.cap_mask[..., None]
        rb = route_batch(caps, batch.cap_mask, params["routing"], iterations, batch.cap_day)
        sel = np.flatnonzero(batch.slot >= 0)
        slots = batch.slot[sel]
        ttr = rb.timestamps[slots]
        delta = np.abs(batch.target_day[sel, None] - ttr)
        w = softmax(-params["alpha"][0] * np.log1p(delta), axis=1)
        hf[sel] = np.einsum("bt,btd->bd", w, rb.vectors[slots])
        cache.enc_n, cache.rb, cache.sel, cache.weights = enc_n, rb, sel, w
        cache.delta, cache.ttr = delta, ttr
    cache.z = np.concatenate([h, hf], axis=1)
    cache.eu = cache.z @ params["proj"].T
    return cache


def loss_and_grads(params, batch: Batch, iterations: int, scored: np.ndarray | None = None,
                   use_trends: bool = True, need_grads: bool = True):
    """Mean NLL of ``batch.target`` and (optionally) gradients for every parameter.

    ``scored`` restricts the softmax to a sorted item subset that must contain
    every target; ``None`` scores the whole vocabulary.
    """
    E = params["item_emb"]
    n_items, d = E.shape
    c = user_forward(params, batch, iterations, use_trends)
    B = batch.size
    if scored is None:
        logits = c.eu @ E.T
        tgt = batch.target
    else:
        tgt = np.searchsorted(scored, batch.target)
        if np.any(tgt >= len(scored)) or np.any(scored[np.minimum(tgt, len(scored) - 1)] != batch.target):
            raise RuntimeError("target missing from the scored item set")
        logits = c.eu @ E[scored].T
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logz - shifted[np.arange(B), tgt]))
    if not need_grads:
        return loss, None

    dlogits = np.exp(shifted - logz[:, None])
    dlogits[np.arange(B), tgt] -= 1.0
    dlogits /= B
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    if scored is None:
        grads["item_emb"] += dlogits.T @ c.eu
        deu = dlogits @ E
    else:
        grads["item_emb"][scored] += dlogits.T @ c.eu
        deu = dlogits @ E[scored]
    P = params["proj"]
    grads["proj"] = deu.T @ c.z
    dz = deu @ P
    dh, dhf = dz[:, :d], dz[:, d:]

    dH = np.zeros_like(c.enc_h.H)
    dH[:, -1] = dh
    g, dX = lstm_backward(c.enc_h, dH, params)
    for k, v in g.items():
        grads[k] += v
    m = batch.hist_mask.astype(bool)
    grads["item_emb"] += scatter_rows(n_items, batch.hist_ids[m], dX[m])

    if c.rb is not None:
        rb, sel = c.rb, c.sel
        slots = batch.slot[sel]
        U, T = rb.timestamps.shape
        w, delta = c.weights, c.delta
        vs = rb.vectors[slots]
        dhf_s = dhf[sel]
        dw = np.einsum("bd,btd->bt", dhf_s, vs)
        dvs = w[:, :, None] * dhf_s[:, None, :]
        dscore = w * (dw - (w * dw).sum(axis=1, keepdims=True))
        alpha = params["alpha"][0]
        grads["alpha"][0] += float(np.sum(dscore * -np.log1p(delta)))
        dttr_s = dscore * (-alpha / (1.0 + delta)) * np.sign(c.ttr - batch.target_day[sel, None])
        dv = np.zeros((U, T, d))
        dttr = np.zeros((U, T))
        np.add.at(dv, slots, dvs)
        np.add.at(dttr, slots, dttr_s)
        dtr, dcaps = route_batch_backward(rb, params["routing"], dv, dttr)
        grads["routing"] += dtr
        cm = batch.cap_mask.astype(bool)
        S, Lf = batch.nseq_ids.shape
        dflat = scatter_rows(S * Lf, batch.cap_src[cm], dcaps[cm])
        g, dXn = lstm_backward(c.enc_n, dflat.reshape(S, Lf, d), params)
        for k, v in g.items():
            grads[k] += v
        nm = batch.nseq_mask.astype(bool)
        grads["item_emb"] += scatter_rows(n_items, batch.nseq_ids[nm], dXn[nm])
    return loss, grads
