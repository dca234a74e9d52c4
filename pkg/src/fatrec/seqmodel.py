"""Item embeddings and the LSTM sequence encoder.

One parameter set encodes both a user's own history and the neighbors'
future sequences. The heavy lifting happens in :mod:`fatrec.kernels`; this
module owns shapes, padding and the public single-sequence API.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .numerics import uniform_init

LSTM_KEYS = ("lstm_W", "lstm_bW", "lstm_V", "lstm_bV")


def init_lstm(rng: np.random.Generator, d: int, forget_bias: float = 0.0) -> dict[str, np.ndarray]:
    scale = 1.0 / np.sqrt(d)
    bW = np.zeros(3 * d)
    bW[:d] = forget_bias
    return {
        "lstm_W": uniform_init(rng, (2 * d, 3 * d), scale),
        "lstm_bW": bW,
        "lstm_V": uniform_init(rng, (2 * d, d), scale),
        "lstm_bV": np.zeros(d),
    }


@dataclass
class EncodedSequence:
    """Hidden states plus everything the backward pass needs.

    Arrays are batched ``(B, L, ...)``; a single sequence is ``B == 1``.
    """

    X: np.ndarray
    mask: np.ndarray
    H: np.ndarray
    C: np.ndarray
    G: np.ndarray
    I: np.ndarray
    TC: np.ndarray

    @property
    def final(self) -> np.ndarray:
        """Last hidden state of each sequence (masked steps carry state forward)."""
        return self.H[:, -1]

    @property
    def states(self) -> np.ndarray:
        return self.H


def lstm_forward(inputs: np.ndarray, params, mask: np.ndarray | None = None) -> EncodedSequence:
    """Run the LSTM over ``inputs`` of shape ``(n, d)`` or ``(B, L, d)``."""
    X = np.asarray(inputs, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.shape[1] == 0:
        raise ValueError("cannot encode an empty sequence")
    X = np.ascontiguousarray(X)
    if mask is None:
        mask = np.ones(X.shape[:2], dtype=np.uint8)
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    W, bW, V, bV = (np.ascontiguousarray(params[k]) for k in LSTM_KEYS)
    H, C, G, I, TC = kernels.lstm_forward(X, mask, W, bW, V, bV)
    return EncodedSequence(X, mask, H, C, G, I, TC)


def lstm_backward(enc: EncodedSequence, dH: np.ndarray, params) -> tuple[dict, np.ndarray]:
    """Gradients of the LSTM parameters and inputs given upstream ``dH`` on hidden states."""
    dH = np.asarray(dH, dtype=np.float64)
    if dH.ndim == 2:
        dH = dH[None]
    dH = np.ascontiguousarray(dH)
    if dH.shape != enc.H.shape:
        raise ValueError(f"upstream gradient shape {dH.shape} != hidden states {enc.H.shape}")
    W, V = np.ascontiguousarray(params["lstm_W"]), np.ascontiguousarray(params["lstm_V"])
    dX, dW, dbW, dV, dbV = kernels.lstm_backward(enc.X, enc.mask, W, V, enc.H, enc.C, enc.G,
                                                 enc.I, enc.TC, dH)
    return {"lstm_W": dW, "lstm_bW": dbW, "lstm_V": dV, "lstm_bV": dbV}, dX


def pad_sequences(seqs, max_len: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Left-align id sequences into ``(B, L)`` ids and a uint8 mask; long ones keep their tail."""
    L = max((len(s) for s in seqs), default=0)
    if max_len is not None:
        L = min(L, max_len)
    ids = np.zeros((len(seqs), max(L, 1)), dtype=np.int64)
    mask = np.zeros((len(seqs), max(L, 1)), dtype=np.uint8)
    for b, s in enumerate(seqs):
        s = np.asarray(s)[-L:] if L else np.asarray(s)[:0]
        ids[b, :len(s)] = s
        mask[b, :len(s)] = 1
    return ids, mask


def encode_sequence(items, table: np.ndarray, params, max_len: int | None = None) -> EncodedSequence:
    """Embed item ids and encode them; sequences longer than ``max_len`` keep their suffix."""
    ids = np.asarray(items, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("cannot encode an empty sequence")
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise ValueError("item id outside the embedding table")
    if max_len is not None:
        ids = ids[-max_len:]
    return lstm_forward(table[ids], params)
