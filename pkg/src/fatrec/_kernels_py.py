"""Pure numpy implementations of the hot kernels.

Same signatures and semantics as the compiled ``_kernels`` module; used when the
extension is not built or ``FATREC_PURE_PYTHON=1`` is set.

Layout conventions
------------------
LSTM batches are ``(B, L, d)`` with a ``(B, L)`` uint8 mask. A masked step carries
``h`` and ``c`` through unchanged, so sequences may be padded on either side.
Gate weights ``W`` are ``(2d, 3d)`` acting on the row vector ``[h_prev, x]`` with
gate order forget, input, output; the candidate weights ``V`` are ``(2d, d)``.

Routing batches are ``(U, n, T, d)`` prediction vectors with a ``(U, n)`` capsule
mask. Masked capsules get zero coupling and never influence the logits.
"""
from __future__ import annotations

import numpy as np

_TINY = 1e-300


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_forward(X, mask, W, bW, V, bV):
    B, L, d = X.shape
    H = np.zeros((B, L, d))
    C = np.zeros((B, L, d))
    G = np.zeros((B, L, 3 * d))
    I = np.zeros((B, L, d))
    TC = np.zeros((B, L, d))
    h = np.zeros((B, d))
    c = np.zeros((B, d))
    Z = np.empty((B, 2 * d))
    for t in range(L):
        m = mask[:, t].astype(bool)
        Z[:, :d] = h
        Z[:, d:] = X[:, t]
        g = _sigmoid(Z @ W + bW)
        cand = np.tanh(Z @ V + bV)
        c_new = g[:, :d] * c + g[:, d:2 * d] * cand
        tc = np.tanh(c_new)
        h_new = g[:, 2 * d:] * tc
        h = np.where(m[:, None], h_new, h)
        c = np.where(m[:, None], c_new, c)
        G[:, t] = np.where(m[:, None], g, 0.0)
        I[:, t] = np.where(m[:, None], cand, 0.0)
        TC[:, t] = np.where(m[:, None], tc, 0.0)
        H[:, t] = h
        C[:, t] = c
    return H, C, G, I, TC


def lstm_backward(X, mask, W, V, H, C, G, I, TC, dH):
    B, L, d = X.shape
    dX = np.zeros_like(X)
    dW = np.zeros_like(W)
    dV = np.zeros_like(V)
    dbW = np.zeros(W.shape[1])
    dbV = np.zeros(V.shape[1])
    dh_next = np.zeros((B, d))
    dc_next = np.zeros((B, d))
    Z = np.empty((B, 2 * d))
    for t in range(L - 1, -1, -1):
        m = mask[:, t].astype(bool)[:, None]
        dh = dH[:, t] + dh_next
        dc = dc_next.copy()
        g = G[:, t]
        f, i, o = g[:, :d], g[:, d:2 * d], g[:, 2 * d:]
        cand = I[:, t]
        tc = TC[:, t]
        h_prev = H[:, t - 1] if t > 0 else np.zeros((B, d))
        c_prev = C[:, t - 1] if t > 0 else np.zeros((B, d))
        dc = dc + dh * o * (1.0 - tc * tc)
        dgate = np.concatenate([dc * c_prev, dc * cand, dh * tc], axis=1) * g * (1.0 - g)
        dcand = dc * i * (1.0 - cand * cand)
        dgate = np.where(m, dgate, 0.0)
        dcand = np.where(m, dcand, 0.0)
        Z[:, :d] = h_prev
        Z[:, d:] = X[:, t]
        dW += Z.T @ dgate
        dV += Z.T @ dcand
        dbW += dgate.sum(axis=0)
        dbV += dcand.sum(axis=0)
        dZ = dgate @ W.T + dcand @ V.T
        dX[:, t] = dZ[:, d:]
        dh_next = np.where(m, dZ[:, :d], dh)
        dc_next = np.where(m, dc * f, dc)
    return dX, dW, dbW, dV, dbV


def _squash_scale(s):
    sq = (s * s).sum(axis=-1, keepdims=True)
    n = np.sqrt(sq)
    return n / (1.0 + sq), n, sq


def squash(s):
    k, _, _ = _squash_scale(s)
    return k * s


def squash_backward(s, gv):
    k, n, sq = _squash_scale(s)
    # d/dn of n/(1+n^2), divided by n; finite limit handled by zeroing at n=0
    dk_over_n = np.where(n > 0, (1.0 - sq) / ((1.0 + sq) ** 2 * np.maximum(n, _TINY)), 0.0)
    return k * gv + dk_over_n * (s * gv).sum(axis=-1, keepdims=True) * s


def route_forward(uhat, mask, iterations, b0=None):
    """Dynamic routing over padded capsule batches.

    Returns ``(v, c_final, C_all, S_all, V_all)`` where the ``*_all`` arrays hold
    per-iteration couplings, pre-squash sums and trend vectors for the backward pass.
    """
    U, n, T, d = uhat.shape
    m = mask.astype(np.float64)[:, :, None]
    b = np.zeros((U, n, T)) if b0 is None else b0.copy()
    C_all = np.zeros((iterations, U, n, T))
    S_all = np.zeros((iterations, U, T, d))
    V_all = np.zeros((iterations, U, T, d))
    for r in range(iterations):
        e = np.exp(b - b.max(axis=2, keepdims=True))
        c = e / e.sum(axis=2, keepdims=True) * m
        s = np.einsum("unt,untd->utd", c, uhat)
        v = squash(s)
        C_all[r], S_all[r], V_all[r] = c, s, v
        if r < iterations - 1:
            b = b + np.einsum("untd,utd->unt", uhat, v) * m
    return V_all[-1].copy(), C_all[-1].copy(), C_all, S_all, V_all


def route_backward(uhat, mask, C_all, S_all, V_all, dv, dc_final):
    iterations = C_all.shape[0]
    m = mask.astype(np.float64)[:, :, None]
    duhat = np.zeros_like(uhat)
    gb_next = np.zeros(C_all.shape[1:])
    for r in range(iterations - 1, -1, -1):
        c = C_all[r]
        if r == iterations - 1:
            gv = dv.copy()
        else:
            gv = np.einsum("unt,untd->utd", gb_next, uhat)
            duhat += gb_next[..., None] * V_all[r][:, None]
        gs = squash_backward(S_all[r], gv)
        gc = np.einsum("utd,untd->unt", gs, uhat)
        if r == iterations - 1:
            gc = gc + dc_final
        duhat += c[..., None] * gs[:, None]
        gb_next = (gb_next + c * (gc - (c * gc).sum(axis=2, keepdims=True))) * m
    return duhat
