import numpy as np
import pytest

from istc.core import SparseCode, cross_coherence, lagrangian, mutual_coherence
from istc.errors import CertificationUnreachable, NoKKTPoint, TooManyAtoms
from istc.oracle import (
    ProblemSpec,
    adversarial_auxiliary,
    exact_positive_lasso,
    generate_planted,
    kkt_check,
    kkt_residual,
    load_instance,
    recovery_window,
    save_instance,
)
from istc.prox import SolverConfig, make_schedule, positive_prox, solve_fista, solve_ista, solve_istc


def orthonormal(n, seed=0):
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((n, n)))
    return q


# generation


def test_noiseless_residual_is_exactly_zero():
    inst = generate_planted(ProblemSpec(10, 6, 2, 0.0, seed=5))
    assert np.array_equal(inst.signal, inst.dictionary @ inst.planted_code.values)
    assert inst.residual_bound == 0.0


def test_noise_has_requested_norm():
    inst = generate_planted(ProblemSpec(10, 6, 2, 0.3, seed=5))
    assert np.linalg.norm(inst.residual) == pytest.approx(0.3, rel=1e-12)
    assert np.linalg.norm(inst.residual) <= inst.residual_bound


def test_same_seed_same_instance():
    a = generate_planted(ProblemSpec(12, 9, 3, 0.1, seed=42, certified=False))
    b = generate_planted(ProblemSpec(12, 9, 3, 0.1, seed=42, certified=False))
    for x, y in [(a.dictionary, b.dictionary), (a.signal, b.signal), (a.planted_code.values, b.planted_code.values)]:
        assert np.array_equal(x, y)


def test_planted_code_in_range_and_support_size():
    inst = generate_planted(ProblemSpec(12, 9, 3, seed=1, coef_range=(1.5, 2.5)))
    v = inst.planted_code.values[inst.planted_code.support]
    assert inst.s == 3
    assert np.all((v >= 1.5) & (v <= 2.5))
    np.testing.assert_array_equal(inst.auxiliary, inst.dictionary)


@pytest.mark.parametrize("seed", range(20))
def test_certified_flag_gives_low_coherence(seed):
    inst = generate_planted(ProblemSpec(32, 8, 1, seed=seed, certified=True))
    assert inst.s * mutual_coherence(inst.dictionary) < 0.5


def test_certified_ensemble_rejection_rate_is_moderate():
    # measured acceptance of P=32, M=8 Gaussian dictionaries under s*mu < 1/2 with s=1
    rng = np.random.default_rng(0)
    mus = []
    for _ in range(500):
        D = rng.standard_normal((32, 8))
        D /= np.linalg.norm(D, axis=0)
        mus.append(mutual_coherence(D))
    assert 0.3 < np.mean(np.array(mus) < 0.5) < 1.0


def test_certification_unreachable():
    with pytest.raises(CertificationUnreachable):
        generate_planted(ProblemSpec(4, 12, 3, seed=0, certified=True, max_retries=20))


@pytest.mark.parametrize(
    "kwargs",
    [dict(support_size=0), dict(support_size=9), dict(noise_level=-1.0), dict(coef_range=(0.0, 1.0)), dict(coef_range=(2.0, 1.0))],
)
def test_spec_validation(kwargs):
    base = dict(signal_dim=8, atom_count=8, support_size=2)
    base.update(kwargs)
    with pytest.raises(ValueError):
        ProblemSpec(**base)


# exact solver


@pytest.mark.parametrize("lam", [0.0, 0.3, 1.2])
def test_orthonormal_closed_form(lam):
    Q = orthonormal(6)
    beta = np.random.default_rng(2).standard_normal(6)
    code = exact_positive_lasso(Q, beta, lam)
    np.testing.assert_allclose(code.values, positive_prox(Q.T @ beta, lam), atol=1e-12)
    assert kkt_check(Q, beta, code, lam, 1e-10)


def test_large_threshold_gives_zero():
    inst = generate_planted(ProblemSpec(8, 12, 2, 0.1, seed=3))
    lam = float(np.max(np.abs(inst.dictionary.T @ inst.signal)))
    code = exact_positive_lasso(inst.dictionary, inst.signal, lam)
    assert code.support.size == 0
    assert kkt_check(inst.dictionary, inst.signal, code, lam)


@pytest.mark.parametrize("seed", range(3))
def test_agrees_with_long_fista(seed):
    rng = np.random.default_rng(100 + seed)
    D = rng.standard_normal((8, 12))
    D /= np.linalg.norm(D, axis=0)
    beta = rng.standard_normal(8)
    lam = 0.2 * float(np.max(np.abs(D.T @ beta)))
    code = exact_positive_lasso(D, beta, lam)
    fista, _ = solve_fista(D, beta, lam, SolverConfig(n_iterations=100000, record_trace=False))
    assert np.max(np.abs(code.values - fista.values)) <= 1e-8


@pytest.mark.parametrize("seed", range(10))
def test_oracle_output_is_kkt_and_optimal(seed):
    inst = generate_planted(ProblemSpec(8, 12, 2, 0.05, seed=seed))
    D, beta = inst.dictionary, inst.signal
    lmax = float(np.max(np.abs(D.T @ beta)))
    lam = 0.1 * lmax
    code = exact_positive_lasso(D, beta, lam, inst.s + 3)
    assert kkt_check(D, beta, code, lam, 1e-9)
    best = lagrangian(D, beta, code, lam)
    sched = make_schedule(lmax, lam, 12)
    for c in (solve_ista(D, beta, lam)[0], solve_fista(D, beta, lam)[0], solve_istc(D, beta, sched)[0]):
        assert best <= lagrangian(D, beta, c, lam) + 1e-9


def test_too_many_atoms():
    with pytest.raises(TooManyAtoms):
        exact_positive_lasso(np.eye(21), np.ones(21), 0.1)


def test_no_kkt_point_when_support_cap_too_small():
    Q = orthonormal(5)
    beta = Q @ np.array([3.0, 2.0, 1.0, 0.0, 0.0])
    with pytest.raises(NoKKTPoint):
        exact_positive_lasso(Q, beta, 0.1, max_support=2)


def test_tie_break_prefers_smaller_then_lexicographic():
    # duplicated atom: supports {0} and {1} give the same optimum
    D = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    code = exact_positive_lasso(D, np.array([2.0, 0.0]), 0.5)
    assert code.support.tolist() == [0]
    assert code.values[0] == pytest.approx(1.5)


def test_near_singular_support_uses_ridge_and_stays_kkt():
    D = np.array([[1.0, 1.0], [0.0, 1e-9]])
    D /= np.linalg.norm(D, axis=0)
    beta = np.array([1.0, 0.0])
    code = exact_positive_lasso(D, beta, 0.1)
    assert kkt_check(D, beta, code, 0.1)


# KKT checker


def test_kkt_detects_perturbation():
    inst = generate_planted(ProblemSpec(8, 12, 2, 0.0, seed=4))
    D, beta = inst.dictionary, inst.signal
    lam = 0.1 * float(np.max(np.abs(D.T @ beta)))
    code = exact_positive_lasso(D, beta, lam)
    m = code.support[0]
    bumped = code.values.copy()
    bumped[m] += 0.01
    # the slack on m moves by exactly 0.01 * ||D_m||^2 = 0.01
    assert kkt_residual(D, beta, bumped, lam)[m] == pytest.approx(0.01, rel=1e-6)
    assert not kkt_check(D, beta, SparseCode(bumped), lam, 1e-6)


def test_kkt_zero_code_above_threshold():
    Q = orthonormal(4)
    beta = np.array([0.2, -0.3, 0.1, 0.0])
    assert kkt_check(Q, beta, np.zeros(4), float(np.max(np.abs(Q.T @ beta))))


def test_kkt_tol_positive():
    with pytest.raises(ValueError):
        kkt_check(np.eye(2), np.ones(2), np.zeros(2), 0.1, 0.0)


# recovery window and support equivalence


@pytest.mark.parametrize("seed", range(5))
def test_recovery_window_recovers_planted_support(seed):
    inst = generate_planted(ProblemSpec(32, 8, 2, 0.0, seed=seed, certified=True))
    D, beta = inst.dictionary, inst.signal
    window = recovery_window(D, beta, inst.planted_code.support)
    assert window is not None
    lo, hi = window
    for lam in np.geomspace(lo, hi, 5)[1:-1]:
        code = exact_positive_lasso(D, beta, lam, inst.s + 3)
        assert code.support.tolist() == inst.planted_code.support.tolist()


# adversarial auxiliary


def test_adversarial_auxiliary_hits_target():
    inst = generate_planted(ProblemSpec(32, 8, 2, seed=0))
    W = adversarial_auxiliary(inst.dictionary, 2, 10.0, np.random.default_rng(0))
    np.testing.assert_allclose(np.einsum("pm,pm->m", W, inst.dictionary), 1.0, atol=1e-10)
    assert 2 * cross_coherence(W, inst.dictionary) >= 10.0


# serialization


def test_instance_round_trip(tmp_path):
    inst = generate_planted(ProblemSpec(9, 7, 2, 0.05, seed=11))
    save_instance(tmp_path, inst, lambda_star=0.125)
    back, lam = load_instance(tmp_path)
    assert lam == 0.125
    assert back.spec == inst.spec
    for x, y in [(back.dictionary, inst.dictionary), (back.signal, inst.signal), (back.auxiliary, inst.auxiliary)]:
        assert np.array_equal(x, y)
    assert back.residual_bound == inst.residual_bound
    again = generate_planted(back.spec)
    assert np.array_equal(again.signal, inst.signal)
