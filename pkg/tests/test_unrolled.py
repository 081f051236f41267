import math
from dataclasses import replace

import numpy as np
import pytest

from istc.core import normalize_auxiliary, normalize_columns
from istc.errors import CacheMismatch, DivergedLoss, ShapeMismatch
from istc.prox import make_schedule, positive_prox, solve_generalized_istc
from istc.unrolled import (
    ToyClassifier,
    TrainConfig,
    UnrolledParams,
    evaluate,
    finite_diff_gradient,
    make_toy_dataset,
    normalization_error,
    train_toy,
    unrolled_backward,
    unrolled_forward,
)

KINK = 1e-4


def random_params(rng, P, M, N, tied, lambda_ratio=0.1):
    D = normalize_columns(rng.standard_normal((P, M)))
    W = None if tied else normalize_auxiliary(D + 0.3 * rng.standard_normal((P, M)), D)
    beta = rng.standard_normal(P)
    aux = D if tied else W
    lmax = float(np.max(np.abs(aux.T @ beta)))
    return UnrolledParams(D, W, math.log(lambda_ratio * lmax), N, lmax), beta


# forward


def test_zero_layers_gives_zero_code():
    rng = np.random.default_rng(0)
    params, beta = random_params(rng, 5, 7, 0, True)
    code, cache = unrolled_forward(params, beta)
    assert code.support.size == 0 and cache.n_layers == 0


def test_one_layer_closed_form():
    rng = np.random.default_rng(1)
    params, beta = random_params(rng, 5, 7, 1, False)
    code, _ = unrolled_forward(params, beta)
    lam1 = params.thresholds(params.lambda_max)[0]
    np.testing.assert_array_equal(code.values, positive_prox(params.W.T @ beta, lam1))
    assert lam1 == pytest.approx(params.lambda_star)


def test_forward_matches_solver_bitwise():
    rng = np.random.default_rng(2)
    for trial in range(1000):
        P, M, N = rng.integers(3, 9), rng.integers(2, 12), rng.integers(1, 15)
        params, beta = random_params(rng, P, M, N, trial % 2 == 0, rng.uniform(0.01, 0.9))
        params = replace(params, lambda_max=None)
        code, cache = unrolled_forward(params, beta)
        sched = make_schedule(cache.lambda_max, params.lambda_star, N)
        ref, _ = solve_generalized_istc(params.D, params.aux, beta, sched, record_trace=False)
        assert np.array_equal(code.values, ref.values)


def test_forward_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        UnrolledParams(np.eye(3), np.eye(3)[:, :2])


# backward


def test_zero_upstream_gradient():
    rng = np.random.default_rng(3)
    params, beta = random_params(rng, 6, 9, 4, False)
    _, cache = unrolled_forward(params, beta)
    g = unrolled_backward(cache, params, np.zeros(9))
    assert not g.flat().any()


def test_one_layer_threshold_gradient_by_hand():
    D = np.eye(3)
    beta = np.array([2.0, 0.1, 0.0])
    params = UnrolledParams(D, None, math.log(0.5), 1, 2.0)
    _, cache = unrolled_forward(params, beta)
    g = unrolled_backward(cache, params, np.array([1.5, 0.0, 0.0]))
    # lambda_1 = lambda_star, so d lambda_1 / d log lambda_star = lambda_star
    assert g.dlog_lambda_star == pytest.approx(-0.5 * 1.5, rel=1e-15)


def fd_instance(rng, tied):
    while True:
        params, beta = random_params(rng, 6, 9, 4, tied, rng.uniform(0.05, 0.3))
        code, cache = unrolled_forward(params, beta)
        if code.support.size and np.min(np.abs(cache.pre)) >= KINK:
            return params, beta


@pytest.mark.parametrize("seed", range(6))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params, beta = fd_instance(rng, tied=seed % 2 == 0)
    c = rng.standard_normal(9)

    def loss(p):
        return float(c @ unrolled_forward(p, beta)[0].values)

    _, cache = unrolled_forward(params, beta)
    analytic = unrolled_backward(cache, params, c).flat()
    numeric = finite_diff_gradient(loss, params, 1e-6).flat()
    small = np.abs(numeric) < 1e-8
    assert np.all(np.abs(analytic[small] - numeric[small]) < 1e-8)
    rel = np.abs(analytic[~small] - numeric[~small]) / np.abs(numeric[~small])
    assert rel.max() < 1e-5


def test_cache_mismatch():
    rng = np.random.default_rng(4)
    params, beta = random_params(rng, 6, 9, 4, True)
    _, cache = unrolled_forward(params, beta)
    with pytest.raises(CacheMismatch):
        unrolled_backward(cache, replace(params, n_layers=5), np.ones(9))
    with pytest.raises(CacheMismatch):
        unrolled_backward(cache, replace(params, log_lambda_star=params.log_lambda_star + 0.1), np.ones(9))


# finite differences


def test_finite_diff_quadratic_in_lambda():
    params = UnrolledParams(np.eye(2), None, 0.3, 1)
    g = finite_diff_gradient(lambda p: 2.0 * p.log_lambda_star**2, params, 1e-4)
    assert g.dlog_lambda_star == pytest.approx(4.0 * 0.3, abs=1e-8)
    assert not g.dD.any()


def test_finite_diff_constant_loss():
    rng = np.random.default_rng(5)
    params, _ = random_params(rng, 4, 5, 2, False)
    assert not finite_diff_gradient(lambda p: 7.0, params).flat().any()


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_gradient(lambda p: 0.0, UnrolledParams(np.eye(2)), 0.0)


# classifier and data


def test_classifier_gradients_match_finite_differences():
    rng = np.random.default_rng(6)
    clf = ToyClassifier(rng.standard_normal((3, 5)), rng.standard_normal(3))
    code = rng.uniform(0, 1, 5)
    loss, dC, db, dcode = clf.loss_and_grads(code, 2)
    h = 1e-6
    num = np.array([(clf.loss_and_grads(code + h * e, 2)[0] - clf.loss_and_grads(code - h * e, 2)[0]) / (2 * h) for e in np.eye(5)])
    np.testing.assert_allclose(dcode, num, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(dC, np.outer(db, code))


def test_toy_dataset_shapes_and_determinism():
    a = make_toy_dataset(seed=3)
    b = make_toy_dataset(seed=3)
    assert a.train_x.shape == (500, 16) and a.val_x.shape == (200, 16)
    assert np.array_equal(a.train_x, b.train_x) and np.array_equal(a.val_y, b.val_y)
    np.testing.assert_allclose(np.linalg.norm(a.train_x, axis=1), 1.0)
    assert a.n_classes == 2


# training


def toy_model(ds, tied, seed=1, lam=0.2):
    rng = np.random.default_rng(seed)
    D = normalize_columns(rng.standard_normal((16, 12)))
    return UnrolledParams(D, None if tied else D.copy(), math.log(lam), 12), ToyClassifier.zeros(ds.n_classes, 12)


def test_zero_learning_rate_keeps_parameters_bitwise():
    ds = make_toy_dataset(n_train=60, n_val=20)
    params, clf = toy_model(ds, tied=False)
    res = train_toy(ds, params, clf, TrainConfig(epochs=2, lr=0.0))
    assert np.array_equal(res.params.D, params.D) and np.array_equal(res.params.W, params.W)
    assert res.params.log_lambda_star == params.log_lambda_star
    assert not res.classifier.weights.any()


@pytest.mark.parametrize("tied", [True, False])
def test_normalizations_hold_every_epoch(tied):
    ds = make_toy_dataset(n_train=100, n_val=40)
    params, clf = toy_model(ds, tied)
    seen = []
    train_toy(ds, params, clf, TrainConfig(epochs=4, lr=0.2), on_epoch=lambda m, p, c: seen.append(normalization_error(p)))
    assert len(seen) == 4 and max(seen) <= 1e-10


def test_short_training_learns():
    ds = make_toy_dataset()
    params, clf = toy_model(ds, tied=True)
    res = train_toy(ds, params, clf, TrainConfig(epochs=10, lambda_lr_scale=0.1))
    assert res.metrics[-1].val_acc >= 0.9
    assert [m.epoch for m in res.metrics] == list(range(1, 11))


def test_resume_matches_uninterrupted():
    ds = make_toy_dataset(n_train=80, n_val=20)
    params, clf = toy_model(ds, tied=False)
    full = train_toy(ds, params, clf, TrainConfig(epochs=4))
    first = train_toy(ds, params, clf, TrainConfig(epochs=2))
    rest = train_toy(ds, first.params, first.classifier, TrainConfig(epochs=2, start_epoch=2))
    assert [m.epoch for m in rest.metrics] == [3, 4]
    assert np.array_equal(rest.params.D, full.params.D)
    assert rest.metrics[-1] == full.metrics[-1]


def test_divergence_is_reported():
    ds = make_toy_dataset(n_train=40, n_val=10)
    params, clf = toy_model(ds, tied=True)
    with pytest.raises(DivergedLoss) as err:
        train_toy(ds, params, clf, TrainConfig(epochs=3, lr=1e308))
    assert err.value.epoch >= 1


def test_evaluate_matches_direct_count():
    ds = make_toy_dataset(n_train=10, n_val=30)
    params, _ = toy_model(ds, tied=True)
    clf = ToyClassifier(np.random.default_rng(0).standard_normal((2, 12)), np.zeros(2))
    codes = [unrolled_forward(params, x)[0].values for x in ds.val_x]
    acc, sparsity = evaluate(params, clf, ds.val_x, ds.val_y)
    assert sparsity == pytest.approx(np.mean([np.count_nonzero(c) / 12 for c in codes]), rel=1e-14)
    assert acc == pytest.approx(np.mean([clf.predict(c) == y for c, y in zip(codes, ds.val_y)]))
