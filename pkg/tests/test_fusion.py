import math

import numpy as np
import pytest

from fatrec.fusion import (attention_weights, fuse_user, loss_and_grads, predict_scores,
                           scatter_rows, time_attention, user_forward)
from fatrec.gradsuite import tiny_fat_instance
from fatrec.numerics import gradient_check


def test_attention_equal_times_uniform():
    v = np.random.default_rng(0).normal(size=(3, 4))
    hf = time_attention(10.0, np.array([4.0, 4.0, 4.0]), v, 1.0)
    assert np.allclose(hf, v.mean(axis=0), atol=1e-15)


def test_attention_alpha_zero_uniform():
    w = attention_weights(0.0, np.array([1.0, 50.0, 900.0]), 0.0)
    assert np.allclose(w, 1 / 3, atol=1e-15)


def test_attention_two_trends():
    w = attention_weights(5.0, np.array([5.0, 6.0]), 1.0)
    assert np.allclose(w, [2 / 3, 1 / 3], atol=1e-15)


def test_attention_monotone_in_gap():
    rng = np.random.default_rng(1)
    for _ in range(100):
        days = rng.uniform(0, 1000, size=6)
        w = attention_weights(500.0, days, float(rng.uniform(0.01, 5)))
        gaps = np.abs(500.0 - days)
        order = np.argsort(gaps)
        assert np.all(np.diff(w[order]) <= 1e-15)
        assert abs(w.sum() - 1) < 1e-12


def test_attention_empty():
    assert time_attention(1.0, np.zeros(0), np.zeros((0, 3)), 1.0) is None


def test_fuse_identity_blocks():
    rng = np.random.default_rng(2)
    h, hf = rng.normal(size=4), rng.normal(size=4)
    P = np.hstack([np.eye(4), np.eye(4)])
    assert np.array_equal(fuse_user(h, None, P), h)
    assert np.array_equal(fuse_user(np.zeros(4), hf, P), hf)
    Q = rng.normal(size=(4, 8))
    direct = [sum(Q[r, k] * np.concatenate([h, hf])[k] for k in range(8)) for r in range(4)]
    assert np.max(np.abs(fuse_user(h, hf, Q) - direct)) < 1e-12


def test_fuse_shape_errors():
    with pytest.raises(ValueError):
        fuse_user(np.zeros(3), np.zeros(4), np.zeros((3, 6)))
    with pytest.raises(ValueError):
        fuse_user(np.zeros(3), np.zeros(3), np.zeros((3, 5)))


def test_predict_scores():
    assert np.allclose(predict_scores(np.ones(3), np.ones((5, 3))), 0.2, atol=1e-15)
    items = np.array([[0.0], [math.log(3)]])
    assert np.allclose(predict_scores(np.array([1.0]), items), [0.25, 0.75], atol=1e-15)
    rng = np.random.default_rng(3)
    e, E = rng.normal(size=8), rng.normal(size=(10, 8))
    p = predict_scores(e, E)
    z = math.fsum(math.exp(float(x)) for x in E @ e)
    assert abs(p.sum() - 1) < 1e-12
    assert np.max(np.abs(p - np.exp(E @ e) / z)) < 1e-12
    with pytest.raises(ValueError):
        predict_scores(e, np.zeros((0, 8)))


def test_scatter_rows():
    out = scatter_rows(4, np.array([1, 3, 1]), np.array([[1.0], [2.0], [5.0]]))
    assert out.ravel().tolist() == [0.0, 6.0, 0.0, 2.0]


def test_loss_single_scored_item_is_zero():
    cfg, p, batch = tiny_fat_instance(0)
    loss, _ = loss_and_grads(p, batch, 2, scored=np.array([5, 7]), need_grads=False)
    batch.target[:] = 5
    loss, _ = loss_and_grads(p, batch, 2, scored=np.array([5]), need_grads=False)
    assert loss == 0.0


def test_loss_uniform_is_log_m():
    cfg, p, batch = tiny_fat_instance(0)
    p["item_emb"][:] = 0.0
    loss, _ = loss_and_grads(p, batch, 2, need_grads=False)
    assert abs(loss - math.log(p["item_emb"].shape[0])) < 1e-12


def test_scored_set_must_contain_target():
    cfg, p, batch = tiny_fat_instance(0)
    with pytest.raises(RuntimeError):
        loss_and_grads(p, batch, 2, scored=np.array([0, 1]))


def test_tiny_end_to_end_gradcheck(backend, monkeypatch):
    from fatrec import kernels
    for name in ("lstm_forward", "lstm_backward", "route_forward", "route_backward"):
        monkeypatch.setattr(kernels, name, getattr(backend, name))
    cfg, p, batch = tiny_fat_instance(0)
    errs = gradient_check(lambda q: loss_and_grads(q, batch, cfg.routing_iters), p, 1e-5)
    assert set(errs) == set(p)
    assert max(errs.values()) < 1e-4, errs


def test_sampled_softmax_gradcheck():
    cfg, p, batch = tiny_fat_instance(1)
    scored = np.array([1, 4, 5, 7, 10])
    errs = gradient_check(lambda q: loss_and_grads(q, batch, 2, scored=scored), p, 1e-5)
    assert max(errs.values()) < 1e-4, errs


def test_zero_trend_block_reproduces_base():
    cfg, p, batch = tiny_fat_instance(2)
    d = cfg.d
    p["proj"] = np.hstack([np.eye(d), np.zeros((d, d))])
    fat = user_forward(p, batch, 2, use_trends=True)
    base = user_forward(p, batch, 2, use_trends=False)
    assert np.any(fat.hf != 0)
    assert np.array_equal(fat.eu, base.eu)
    assert np.array_equal(fat.eu @ p["item_emb"].T, base.eu @ p["item_emb"].T)


def test_sample_without_capsules_gets_zero_trend():
    cfg, p, batch = tiny_fat_instance(0)
    c = user_forward(p, batch, 2)
    assert batch.slot[1] == -1 and np.all(c.hf[1] == 0) and np.any(c.hf[0] != 0)
