"""Compiled vs pure-python kernels on training-sized batches.

    python benchmarks/bench_kernels.py [--repeat 5] [--d 64]

Prints the best-of-repeat wall time per kernel for each available backend and the
speedup of the compiled core. Both backends get identical inputs and their outputs
are checked to agree before timing.
"""
import argparse
import time

import numpy as np

from fatrec import kernels
from fatrec.seqmodel import init_lstm
from fatrec.trends import init_transforms, predictions


def _backends():
    out = {"python": kernels.backend_module("python")}
    try:
        out["cython"] = kernels.backend_module("cython")
    except ImportError:
        pass
    return out


def _cases(d, rng):
    B, L = 256, 50
    X = rng.normal(size=(B, L, d))
    lens = rng.integers(1, L + 1, size=B)
    mask = (np.arange(L)[None] >= L - lens[:, None]).astype(np.uint8)
    p = init_lstm(rng, d)
    W, bW, V, bV = (np.ascontiguousarray(p[k]) for k in ("lstm_W", "lstm_bW", "lstm_V", "lstm_bV"))
    dH = rng.normal(size=(B, L, d))

    U, n, T = 256, 60, 6
    cmask = (np.arange(n)[None] < rng.integers(1, n + 1, size=U)[:, None]).astype(np.uint8)
    caps = rng.normal(size=(U, n, d)) * cmask[..., None]
    uhat = np.ascontiguousarray(predictions(caps, init_transforms(rng, T, d)))
    dv = rng.normal(size=(U, T, d))
    dc = np.zeros((U, n, T))

    def lstm_fwd(k):
        return k.lstm_forward(X, mask, W, bW, V, bV)

    def lstm_bwd(k):
        H, C, G, I, TC = k.lstm_forward(X, mask, W, bW, V, bV)
        return lambda: k.lstm_backward(X, mask, W, V, H, C, G, I, TC, dH)

    def route_fwd(k):
        return k.route_forward(uhat, cmask, 3, None)

    def route_bwd(k):
        _, _, C_all, S_all, V_all = k.route_forward(uhat, cmask, 3, None)
        return lambda: k.route_backward(uhat, cmask, C_all, S_all, V_all, dv, dc)

    return {
        f"lstm_forward   B={B} L={L} d={d}": lambda k: (lambda: lstm_fwd(k)),
        f"lstm_backward  B={B} L={L} d={d}": lstm_bwd,
        f"route_forward  U={U} n={n} T={T} d={d}": lambda k: (lambda: route_fwd(k)),
        f"route_backward U={U} n={n} T={T} d={d}": route_bwd,
    }


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def _agree(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.max(np.abs(np.asarray(x) - np.asarray(y)))) for x, y in zip(a, b) if x is not None)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--d", type=int, default=64)
    a = ap.parse_args()
    backs = _backends()
    cases = _cases(a.d, np.random.default_rng(0))
    print(f"{'kernel':42s} " + " ".join(f"{b:>10s}" for b in backs) + ("    speedup  max|diff|" if len(backs) > 1 else ""))
    for name, make in cases.items():
        fns = {b: make(k) for b, k in backs.items()}
        secs = {b: _best(f, a.repeat) for b, f in fns.items()}
        row = f"{name:42s} " + " ".join(f"{secs[b] * 1e3:8.1f}ms" for b in backs)
        if len(backs) > 1:
            row += f"  {secs['python'] / secs['cython']:8.2f}x  {_agree(fns['python'](), fns['cython']()):.1e}"
        print(row)


if __name__ == "__main__":
    main()
