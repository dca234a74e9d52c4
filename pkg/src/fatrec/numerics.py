"""Dense numerical helpers shared by every learned component.

Everything here works on float64 numpy arrays. Parameter collections are plain
``dict[str, np.ndarray]`` so the optimizer and the finite-difference checker
can walk them by name.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

ParamDict = dict[str, np.ndarray]


def softmax(scores, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax along ``axis``."""
    x = np.asarray(scores, dtype=np.float64)
    if x.size == 0:
        raise ValueError("softmax of an empty vector")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax_backward(probs: np.ndarray, grad: np.ndarray, axis: int = -1) -> np.ndarray:
    """Vector-Jacobian product of softmax given its output ``probs``."""
    return probs * (grad - (probs * grad).sum(axis=axis, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split to avoid overflow in exp for large negative inputs
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def uniform_init(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape).astype(np.float64)


@dataclass
class AdamState:
    m: ParamDict = field(default_factory=dict)
    v: ParamDict = field(default_factory=dict)
    step: int = 0


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_step(
    params: ParamDict,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    hyper: AdamConfig = AdamConfig(),
    skip: frozenset[str] = frozenset(),
) -> None:
    """Apply one bias-corrected Adam update to ``params`` in place.

    Parameters named in ``skip`` keep their values but their moments are still
    tracked, so toggling a parameter frozen/learnable does not reset history.
    """
    for name, g in grads.items():
        if name not in params:
            raise ValueError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter {name!r} {params[name].shape}"
            )
    state.step += 1
    t = state.step
    c1 = 1.0 - hyper.beta1**t
    c2 = 1.0 - hyper.beta2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * (g * g)
        if name in skip:
            continue
        p -= hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.epsilon)


def numeric_gradient(
    f: Callable[[ParamDict], float], params: ParamDict, name: str, eps: float = 1e-5,
    coords=None,
) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``params[name]`` (perturbed in place, restored)."""
    p = params[name]
    flat = p.reshape(-1)
    out = np.zeros(flat.shape)
    idx = range(flat.size) if coords is None else coords
    for k in idx:
        old = flat[k]
        flat[k] = old + eps
        fp = f(params)
        flat[k] = old - eps
        fm = f(params)
        flat[k] = old
        out[k] = (fp - fm) / (2.0 * eps)
    return out.reshape(p.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def gradient_check(
    loss_fn: Callable[[ParamDict], tuple[float, Mapping[str, np.ndarray]]],
    params: ParamDict,
    eps: float = 1e-5,
    groups=None,
) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients, per group.

    ``loss_fn(params)`` must return ``(loss, grads)``. Only the parameters named in
    ``groups`` (default: every key of ``grads``) are checked.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-3]")
    loss0, grads = loss_fn(params)
    loss1, _ = loss_fn(params)
    if loss0 != loss1:
        raise ValueError("loss_fn is not deterministic: two evaluations differ")

    def f(p):
        return loss_fn(p)[0]

    names = list(grads) if groups is None else list(groups)
    report = {}
    for name in names:
        num = numeric_gradient(f, params, name, eps)
        report[name] = float(relative_error(grads[name], num).max())
    return report
