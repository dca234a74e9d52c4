"""Dynamic routing of neighbor future-behavior capsules into trend capsules.

Each trend j owns a ``d x d`` transform shared by every primary capsule, so
the prediction vectors are ``uhat[i, j] = W_j @ e_i``. Routing logits start at
zero (or a supplied init), couplings are a softmax over trends, and the logits
grow by the agreement ``uhat[i, j] . v_j`` between iterations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .numerics import uniform_init


def squash(s) -> np.ndarray:
    """Shrink ``s`` to norm ``|s|^2 / (1 + |s|^2)`` along the last axis; zero maps to zero."""
    return kernels.squash(np.asarray(s, dtype=np.float64))


def init_transforms(rng: np.random.Generator, T: int, d: int) -> np.ndarray:
    return uniform_init(rng, (T, d, d), 1.0 / np.sqrt(d))


def _flat_transforms(transforms: np.ndarray) -> np.ndarray:
    T, d, _ = transforms.shape
    # column j*d + a holds row a of W_j
    return np.ascontiguousarray(transforms.transpose(2, 0, 1).reshape(d, T * d))


def predictions(caps: np.ndarray, transforms: np.ndarray) -> np.ndarray:
    """Prediction vectors ``(U, n, T, d)`` for capsules ``(U, n, d)``."""
    U, n, d = caps.shape
    T = transforms.shape[0]
    return (caps.reshape(U * n, d) @ _flat_transforms(transforms)).reshape(U, n, T, d)


def trend_timestamps(coupling: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Coupling-weighted mean capsule time per trend; works batched over leading axes."""
    mass = coupling.sum(axis=-2)
    return np.einsum("...it,...i->...t", coupling, times) / mass


@dataclass
class RoutingBatch:
    """Routed trends for ``U`` padded capsule sets plus the backward cache."""

    caps: np.ndarray
    mask: np.ndarray
    times: np.ndarray
    uhat: np.ndarray
    vectors: np.ndarray
    coupling: np.ndarray
    timestamps: np.ndarray
    mass: np.ndarray
    C_all: np.ndarray
    S_all: np.ndarray
    V_all: np.ndarray


def route_batch(caps: np.ndarray, mask: np.ndarray, transforms: np.ndarray, iterations: int,
                times: np.ndarray | None = None, b0: np.ndarray | None = None) -> RoutingBatch:
    if iterations < 1:
        raise ValueError("routing needs at least one iteration")
    if transforms.shape[0] < 1:
        raise ValueError("need at least one trend")
    caps = np.ascontiguousarray(caps, dtype=np.float64)
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    if not mask.any(axis=1).all():
        raise ValueError("every routed set needs at least one primary capsule")
    if times is None:
        times = np.zeros(mask.shape)
    uhat = predictions(caps, transforms)
    v, c, C_all, S_all, V_all = kernels.route_forward(uhat, mask, int(iterations), b0)
    mass = c.sum(axis=1)
    ttr = np.einsum("uit,ui->ut", c, times) / mass
    return RoutingBatch(caps, mask, np.asarray(times, dtype=np.float64), uhat, v, c, ttr, mass,
                        C_all, S_all, V_all)


def route_batch_backward(rb: RoutingBatch, transforms: np.ndarray, dv: np.ndarray,
                         dttr: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. the transforms ``(T, d, d)`` and the primary capsules ``(U, n, d)``."""
    U, n, T, d = rb.uhat.shape
    dv = np.ascontiguousarray(dv, dtype=np.float64)
    if dv.shape != (U, T, d):
        raise ValueError(f"trend gradient shape {dv.shape} != {(U, T, d)}")
    if dttr is None:
        dc = np.zeros((U, n, T))
    else:
        # d ttr_j / d c_ij = (t_i - ttr_j) / mass_j
        dc = (rb.times[:, :, None] - rb.timestamps[:, None, :]) / rb.mass[:, None, :]
        dc = dc * dttr[:, None, :] * rb.mask[:, :, None]
    duhat = kernels.route_backward(rb.uhat, rb.mask, rb.C_all, rb.S_all, rb.V_all, dv,
                                   np.ascontiguousarray(dc))
    flat = duhat.reshape(U * n, T * d)
    dflat = rb.caps.reshape(U * n, d).T @ flat
    dtransforms = dflat.reshape(d, T, d).transpose(1, 2, 0)
    dcaps = (flat @ _flat_transforms(transforms).T).reshape(U, n, d)
    return np.ascontiguousarray(dtransforms), dcaps


@dataclass
class TrendCapsules:
    vectors: np.ndarray      # (T, d)
    coupling: np.ndarray     # (n, T), rows sum to 1
    timestamps: np.ndarray   # (T,)
    mass: np.ndarray         # (T,)
    batch: RoutingBatch


def route_trends(caps: np.ndarray, transforms: np.ndarray, T: int | None = None,
                 iterations: int = 3, times=None, b0=None) -> TrendCapsules | None:
    """Route one capsule set ``(n, d)``; returns ``None`` for an empty set (no trends)."""
    caps = np.asarray(caps, dtype=np.float64)
    if T is not None and T != transforms.shape[0]:
        raise ValueError(f"T={T} but {transforms.shape[0]} transforms given")
    if T is not None and T < 1:
        raise ValueError("T must be >= 1")
    if caps.shape[0] == 0:
        return None
    n = caps.shape[0]
    t = None if times is None else np.asarray(times, dtype=np.float64)[None]
    rb = route_batch(caps[None], np.ones((1, n), np.uint8), transforms, iterations, t,
                     None if b0 is None else np.asarray(b0)[None])
    return TrendCapsules(rb.vectors[0], rb.coupling[0], rb.timestamps[0], rb.mass[0], rb)


def route_backward(trends: TrendCapsules, transforms: np.ndarray, dv: np.ndarray,
                   dttr: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    dtr, dcaps = route_batch_backward(trends.batch, transforms, np.asarray(dv)[None],
                                      None if dttr is None else np.asarray(dttr)[None])
    return dtr, dcaps[0]
