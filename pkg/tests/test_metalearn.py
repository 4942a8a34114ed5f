import math

import numpy as np
import pytest

from nashmeta import aggregation as agg
from nashmeta.data import load_dataset
from nashmeta.linalg_nn import MlpModel, cross_entropy_per_example, mlp_forward, per_example_gradients, weighted_gradient
from nashmeta.metalearn import (
    BARGAIN,
    FAIRNESS,
    HypergradientSet,
    TrainConfig,
    epsilon_update,
    example_weights,
    group_hypergradients,
    hypergradients_from_gradients,
    train_two_stage,
    unroll_inner_step,
    weighted_param_update,
)


@pytest.fixture
def net():
    m = MlpModel.init(2, seed=4, hidden=(3, 3))
    assert m.P <= 30
    return m


@pytest.fixture
def batch():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(4, 2))
    y = np.array([0, 1, 1, 0])
    val = [(rng.normal(size=(3, 2)), np.array([1, 0, 1])), (rng.normal(size=(2, 2)), np.array([0, 1]))]
    return X, y, val


def hg_of(g):
    g = np.asarray(g, dtype=float)
    return HypergradientSet(g=g, val_grads=np.zeros((g.shape[0], 1)), val_losses=np.zeros(g.shape[0]))


def test_unroll_examples(net, batch):
    X, y, _ = batch
    assert np.array_equal(unroll_inner_step(net, X, y, np.zeros(4), 0.1), net.theta)
    rows = per_example_gradients(net, X, y).grads
    one_hot = np.array([0.0, 0.0, 1.0, 0.0])
    assert np.allclose(unroll_inner_step(net, X, y, one_hot, 0.1), net.theta - 0.1 * rows[2], atol=1e-15)
    mean_grad, _ = weighted_gradient(net, X, y)
    assert np.allclose(unroll_inner_step(net, X, y, np.full(4, 0.25), 0.1), net.theta - 0.1 * mean_grad, atol=1e-15)
    with pytest.raises(ValueError):
        unroll_inner_step(net, X, y, np.zeros(3), 0.1)


def test_hypergradient_dot_examples():
    g = hypergradients_from_gradients([[1.0, 0.0]], [[2.0, 0.0], [0.0, 3.0]], lr=0.1)
    assert g.tolist() == [[-0.2, 0.0]]
    assert np.array_equal(hypergradients_from_gradients([[0.0, 1.0]], [[2.0, 0.0], [5.0, 0.0]], 0.1), [[0.0, 0.0]])


def test_hypergradients_match_finite_differences(net, batch):
    X, y, val = batch
    lr = 0.1
    hg = group_hypergradients(net, X, y, val, lr)
    assert hg.g.shape == (2, 4)
    h = 1e-5

    def group_loss(k, eps):
        m = net.with_theta(unroll_inner_step(net, X, y, eps, lr))
        Xk, yk = val[k]
        return cross_entropy_per_example(mlp_forward(m, Xk), yk).mean()

    for k in range(2):
        for i in range(4):
            e = np.zeros(4)
            e[i] = h
            fd = (group_loss(k, e) - group_loss(k, -e)) / (2 * h)
            assert hg.g[k, i] == pytest.approx(fd, rel=1e-5, abs=1e-12)


def test_empty_validation_group(net, batch):
    X, y, val = batch
    with pytest.raises(ValueError):
        group_hypergradients(net, X, y, [val[0], (np.zeros((0, 2)), np.zeros(0, dtype=int))], 0.1)


def test_epsilon_update_examples():
    g = np.array([[1.0, 2.0, 0.0], [0.0, 1.0, 3.0]])
    eps, rec = epsilon_update(hg_of(g), t=5, T_bar=5, protocol_kind="ltr", group_val_losses=[0.1, 0.2])
    assert eps == pytest.approx((g[0] + g[1]) / 2)
    assert rec.stage == FAIRNESS and rec.status is None

    anti = np.array([[1.0, 0.0], [-1.0, 0.0]])
    eps, rec = epsilon_update(hg_of(anti), t=0, T_bar=5, protocol_kind="gdro", group_val_losses=[0.3, 0.1])
    assert rec.stage == BARGAIN and rec.status == agg.INFEASIBLE
    assert eps.tolist() == [1.0, 0.0] and rec.protocol == "gdro"

    orth = np.array([[2.0, 0.0], [0.0, 1.0]])
    eps, rec = epsilon_update(hg_of(orth), t=0, T_bar=5, protocol_kind="ltr", group_val_losses=[0, 0])
    assert eps == pytest.approx(0.5 * orth[0] + 1.0 * orth[1], abs=1e-12)
    assert rec.alpha == pytest.approx([0.5, 1.0]) and rec.min_utility > 0

    zero = np.array([[0.0, 0.0], [1.0, 1.0]])
    eps, rec = epsilon_update(hg_of(zero), t=0, T_bar=5, protocol_kind="ltr", group_val_losses=[0, 0])
    assert rec.reason == agg.ZERO_GRADIENT and eps == pytest.approx([0.5, 0.5])


def test_weight_examples(net, batch):
    X, y, _ = batch
    assert example_weights([-3.0, 4.0, 0.0]).tolist() == [1.0, 0.0, 0.0]
    assert example_weights([-1.0, -1.0]) == pytest.approx([math.sqrt(2) / 2] * 2)
    assert example_weights([-1.0, -3.0], norm="l1") == pytest.approx([0.25, 0.75])
    new, w = weighted_param_update(net, X, y, np.ones(4), lr=0.1, momentum=0.0, weight_decay=5e-4)
    assert not np.any(w)
    assert np.allclose(new.theta, net.theta * (1 - 0.1 * 5e-4), atol=1e-16)


def test_weights_follow_closed_form(net, batch):
    X, y, val = batch
    lr = 0.05
    hg = group_hypergradients(net, X, y, val, lr)
    phi = np.array([1.0, -1.0])
    eps = hg.g.T @ phi
    w = example_weights(eps)
    b = per_example_gradients(net, X, y).grads
    a = np.stack([weighted_gradient(net, Xk, yk)[0] for Xk, yk in val])
    raw = np.maximum(lr * b @ (phi @ a), 0.0)
    assert np.any(raw)
    assert w == pytest.approx(raw / np.linalg.norm(raw), rel=1e-8, abs=1e-14)


@pytest.fixture
def tiny_ds(tiny_spec):
    return load_dataset(tiny_spec)


def small(**kw):
    base = dict(protocol="forml", epochs=4, bargain_epochs=2, lr=0.01, dropout=0.2, batch_size=8,
                seed=1, hidden=(8, 8))
    base.update(kw)
    return TrainConfig(**base)


def test_train_is_deterministic(tiny_ds):
    a = train_two_stage(small(), tiny_ds)
    b = train_two_stage(small(), tiny_ds)
    assert [r.to_dict() for r in a.records] == [r.to_dict() for r in b.records]
    assert np.array_equal(a.model.theta, b.model.theta)
    assert a.epochs == b.epochs


def test_stage_schedule_and_alignment(tiny_ds):
    res = train_two_stage(small(), tiny_ds)
    steps_per_epoch = math.ceil(tiny_ds.train_idx.size / 8)
    T_bar = 2 * steps_per_epoch
    assert all((r.stage == BARGAIN) == (r.t < T_bar) for r in res.records)
    agreed = [r for r in res.records if r.status == agg.AGREED]
    assert agreed and all(r.min_utility > 0 for r in agreed)
    assert set(res.epochs[0]["test"]) >= {"overall_auc", "max_gaucd", "worst_gauc", "group_auc"}


def test_zero_bargain_epochs_is_one_stage(tiny_ds):
    res = train_two_stage(small(bargain_epochs=0), tiny_ds)
    assert all(r.stage == FAIRNESS and r.protocol == "forml" for r in res.records)


def test_full_bargaining(tiny_ds):
    res = train_two_stage(small(bargain_epochs=4), tiny_ds)
    assert all(r.stage == BARGAIN for r in res.records)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=5, bargain_epochs=6)
    with pytest.raises(ValueError):
        TrainConfig(protocol="median")
