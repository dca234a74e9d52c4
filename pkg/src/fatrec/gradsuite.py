"""Finite-difference gradient suites for each differentiable stage.

Each suite builds a small random problem, a scalar loss with known analytic
gradients and compares them against central differences.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .fusion import loss_and_grads
from .numerics import gradient_check, softmax, softmax_backward
from .seqmodel import init_lstm, lstm_backward, lstm_forward
from .training import CapsulePlan, TrainConfig, init_params, make_batch
from .trends import init_transforms, route_batch, route_batch_backward


def _softmax_suite(rng, eps):
    p = {"x": rng.normal(size=(3, 7))}
    R = rng.normal(size=(3, 7))

    def fn(q):
        s = softmax(q["x"], axis=1)
        return float(np.sum(R * s)), {"x": softmax_backward(s, R, axis=1)}

    return gradient_check(fn, p, eps)


def _lstm_suite(rng, eps):
    d = 6
    p = init_lstm(rng, d)
    p["lstm_bW"] = rng.normal(scale=0.1, size=3 * d)
    p["x"] = rng.normal(size=(3, 5, d))
    mask = np.ones((3, 5), np.uint8)
    mask[1, 3:] = 0
    mask[2, 1:] = 0
    R = rng.normal(size=(3, 5, d))

    def fn(q):
        enc = lstm_forward(q["x"], q, mask)
        g, dX = lstm_backward(enc, R, q)
        g["x"] = dX
        return float(np.sum(R * enc.H)), g

    return gradient_check(fn, p, eps)


def _routing_suite(rng, eps):
    U, n, T, d = 2, 5, 3, 4
    mask = np.ones((U, n), np.uint8)
    mask[1, 3:] = 0
    times = rng.uniform(0, 50, size=(U, n))
    p = {"routing": init_transforms(rng, T, d), "caps": rng.normal(size=(U, n, d))}
    Rv, Rt = rng.normal(size=(U, T, d)), rng.normal(size=(U, T))

    def fn(q):
        caps = q["caps"] * mask[..., None]
        rb = route_batch(caps, mask, q["routing"], 3, times)
        dtr, dcaps = route_batch_backward(rb, q["routing"], Rv, Rt)
        loss = float(np.sum(Rv * rb.vectors) + np.sum(Rt * rb.timestamps))
        return loss, {"routing": dtr, "caps": dcaps * mask[..., None]}

    return gradient_check(fn, p, eps)


def tiny_fat_instance(seed: int = 0):
    """The reference FAT problem: d=8, history length 5, 4 capsules, T=3, 2 routing iterations."""
    rng = np.random.default_rng(seed)
    n_items = 12
    cfg = TrainConfig(d=8, T=3, routing_iters=2, max_seq_len=5, seed=seed, alpha=0.7)
    params = init_params(cfg, n_items)
    # default init leaves the trend path nearly flat (alpha gradient ~1e-11, below the
    # relative-error floor); larger inputs make every group measurable
    params["item_emb"] *= 3.0
    params["routing"] *= 2.0
    params["proj"] *= 2.0
    params["lstm_bW"] = rng.normal(scale=0.1, size=params["lstm_bW"].shape)
    params["lstm_bV"] = rng.normal(scale=0.1, size=params["lstm_bV"].shape)
    plans = [
        CapsulePlan([(7, 3), (8, 3)], [np.array([3, 5, 9]), np.array([3, 1])],
                    [np.array([10.0, 12.5, 30.0]), np.array([11.0, 40.0])], [3, 1]),
        CapsulePlan([], [], [], []),
    ]
    hist = [np.array([2, 3, 4, 6, 3]), np.array([1, 0, 2])]
    batch = make_batch(hist, [5, 7], [33.0, 20.0], [0, 1], plans, 5)
    return cfg, params, batch


def _fat_suite(seed, eps):
    cfg, params, batch = tiny_fat_instance(seed)

    def fn(q):
        return loss_and_grads(q, batch, cfg.routing_iters)

    return gradient_check(fn, params, eps)


SUITES = {
    "numerics": lambda rng, eps, seed: _softmax_suite(rng, eps),
    "seqmodel": lambda rng, eps, seed: _lstm_suite(rng, eps),
    "trends": lambda rng, eps, seed: _routing_suite(rng, eps),
    "fusion": lambda rng, eps, seed: _fat_suite(seed, eps),
}


def run_suites(eps: float = 1e-5, seed: int = 0, names=None) -> Iterator[tuple[str, str, float]]:
    """Yield ``(suite, parameter group, max relative error)``."""
    for name in (SUITES if names is None else names):
        rng = np.random.default_rng([seed, len(name)])
        for group, err in SUITES[name](rng, eps, seed).items():
            yield name, group, err
