import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctd_rals.ctd import SeparatedOperator
from ctd_rals.diagnostics import (
    RankDeficientError,
    check_hadamard_gram_bound,
    check_product_cond_bound,
    condition_number,
    power_method_norm,
)


def test_condition_number_examples(rng):
    rep = condition_number(np.eye(3))
    assert rep.kappa == 1.0 and rep.rank == 3
    assert condition_number(np.diag([10.0, 1.0])).kappa == pytest.approx(10.0)
    a = rng.standard_normal((7, 4))
    assert condition_number(a).kappa == pytest.approx(np.linalg.cond(a), rel=1e-10)
    sing = condition_number(np.diag([1.0, 1e-3, 0.0]))
    assert sing.rank == 2 and sing.sigma_min == pytest.approx(1e-3)
    with pytest.raises(ValueError):
        condition_number(np.zeros((2, 2)))


@given(st.integers(0, 2**32 - 1), st.floats(1e-6, 1e6))
@settings(max_examples=100)
def test_condition_number_scale_invariant(seed, alpha):
    a = np.random.default_rng(seed).standard_normal((5, 3))
    k1, k2 = condition_number(a).kappa, condition_number(alpha * a).kappa
    assert k2 == pytest.approx(k1, rel=1e-9)
    assert k1 >= 1.0


def _unit_gram(rng, r, m):
    x = rng.standard_normal((m, r))
    x /= np.linalg.norm(x, axis=0)
    return x.T @ x


def test_hadamard_bound_cases(rng):
    b = _unit_gram(rng, 4, 6)
    assert check_hadamard_gram_bound(np.eye(4), b)
    w = check_hadamard_gram_bound(b, b)
    assert w and w.values["lam_min_ab"] >= w.values["lam_min_b"] - 1e-9
    with pytest.raises(ValueError):
        check_hadamard_gram_bound(2 * np.eye(3), np.eye(3))
    with pytest.raises(ValueError):
        check_hadamard_gram_bound(np.eye(3), np.eye(2))
    with pytest.raises(ValueError):
        check_hadamard_gram_bound(np.array([[1.0, 2.0], [2.0, 1.0]]), np.eye(2))


def test_hadamard_bound_500_instances():
    rng = np.random.default_rng(2024)
    for _ in range(500):
        r = int(rng.integers(1, 8))
        a = _unit_gram(rng, r, int(rng.integers(1, 10)))
        b = _unit_gram(rng, r, int(rng.integers(1, 10)))
        assert check_hadamard_gram_bound(a, b)
        assert check_hadamard_gram_bound(b, a)


def test_product_bound_cases(rng):
    # A with orthonormal rows and B in its row space: the bound is tight
    q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    a = q[:4]
    b = a.T @ np.diag([3.0, 2.0, 1.0, 0.5])[:, :3]
    w = check_product_cond_bound(a, b)
    assert w and w.values["kappa_ab"] == pytest.approx(w.values["bound"], rel=1e-10)
    with pytest.raises(ValueError):
        check_product_cond_bound(rng.standard_normal((2, 5)), rng.standard_normal((5, 3)))
    with pytest.raises(RankDeficientError):
        check_product_cond_bound(rng.standard_normal((3, 5)), np.ones((5, 2)))


def test_product_bound_500_instances():
    rng = np.random.default_rng(7)
    for _ in range(500):
        n = int(rng.integers(2, 12))
        r_prime = int(rng.integers(1, n + 1))
        r = int(rng.integers(1, r_prime + 1))
        a = rng.choice([-1.0, 1.0], size=(r_prime, n)) if rng.random() < 0.5 else rng.standard_normal((r_prime, n))
        b = rng.standard_normal((n, r))
        try:
            w = check_product_cond_bound(a, b)
        except RankDeficientError:
            continue
        assert w, w.values


def test_power_method_identity_and_diagonal():
    ident = SeparatedOperator.identity((4, 5, 3))
    assert power_method_norm(ident, tol=1e-10).value == pytest.approx(1.0, rel=1e-10)
    diag = SeparatedOperator([[np.diag([3.7, 1.0, 0.5])], [np.eye(4)]])
    est = power_method_norm(diag, tol=1e-10, max_it=2000)
    assert est.converged and est.value == pytest.approx(3.7, rel=1e-4)


@pytest.mark.parametrize("seed", range(3))
def test_power_method_matches_dense(seed):
    rng = np.random.default_rng(seed)
    sym = []
    for _ in range(3):
        x = rng.standard_normal((2, 6, 6))
        sym.append([x[0] + x[0].T, x[1] + x[1].T])
    # three terms over two directions; symmetric so it is iterated directly
    op = SeparatedOperator([[t[0] for t in sym], [t[1] for t in sym]], [1.0, 0.5, -0.3])
    exact = np.linalg.norm(op.to_dense(), 2)
    est = power_method_norm(op, tol=1e-9, max_it=5000, eps_pm=1e-10, rank_cap=40, seed=seed)
    assert est.value == pytest.approx(exact, rel=1e-4)


def test_power_method_nonsymmetric(rng):
    op = SeparatedOperator([[rng.standard_normal((5, 5))], [rng.standard_normal((4, 4))]])
    exact = np.linalg.norm(op.to_dense(), 2)
    est = power_method_norm(op, tol=1e-10, max_it=5000)
    assert est.value == pytest.approx(exact, rel=1e-4)


def test_power_method_with_truncation(rng):
    # rank_cap below the iterate rank forces ALS reductions along the way
    blocks = [[np.diag(rng.uniform(0.5, 1.0, 6)) for _ in range(3)] for _ in range(3)]
    op = SeparatedOperator(blocks, [1.0, 0.4, 0.2])
    exact = np.linalg.norm(op.to_dense(), 2)
    est = power_method_norm(op, tol=1e-8, max_it=3000, eps_pm=1e-8, rank_cap=2)
    assert est.value == pytest.approx(exact, rel=1e-4)
    assert est.value <= exact * (1 + 1e-4)


def test_power_method_errors():
    with pytest.raises(ValueError):
        power_method_norm(SeparatedOperator.identity((2,)), tol=0)
