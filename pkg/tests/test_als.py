from fractions import Fraction

import numpy as np
import pytest
from conftest import random_ctd
from hypothesis import given, settings
from hypothesis import strategies as st

from ctd_rals.als import (
    AlsConfig,
    DegenerateSolveError,
    SweepReport,
    _State,
    als_sweep,
    build_normal_system,
    gram_matrix,
    max_condition,
    reduce,
    solve_normal,
    solve_normal_dd,
    solve_normal_refined,
)
from ctd_rals.ctd import Ctd, ShapeError, khatri_rao_flatten, relative_error
from ctd_rals.experiments import gen_sine_tensor


def test_gram_matrix_examples(rng):
    a = Ctd.random((3, 4), 1, 0)
    np.testing.assert_allclose(gram_matrix(a, a, 1), [[1.0]])
    q, _ = np.linalg.qr(rng.standard_normal((5, 3)))
    b = Ctd([q, rng.standard_normal((2, 3))], np.ones(3))
    np.testing.assert_allclose(gram_matrix(b, b, 0), np.eye(3), atol=1e-14)
    f, g = random_ctd(rng, (4, 5), 3), random_ctd(rng, (4, 5), 2)
    np.testing.assert_allclose(gram_matrix(f, g, 1), f.factors[1].T @ g.factors[1], atol=1e-13)
    with pytest.raises(IndexError):
        gram_matrix(f, g, 2)
    with pytest.raises(ShapeError):
        gram_matrix(f, random_ctd(rng, (4, 6), 1), 0)


def test_normal_system_small_cases(rng):
    f, g = random_ctd(rng, (3, 4), 3), random_ctd(rng, (3, 4), 2)
    bk, _ = build_normal_system(f, g, 0)
    np.testing.assert_allclose(bk, gram_matrix(f, f, 1), atol=1e-14)
    one = Ctd.random((3, 4, 5), 1, 1)
    bk, _ = build_normal_system(one, g if g.dims == 3 else random_ctd(rng, (3, 4, 5), 2), 2)
    np.testing.assert_allclose(bk, [[1.0]], atol=1e-14)
    with pytest.raises(IndexError):
        build_normal_system(f, g, -1)


@st.composite
def _instances(draw):
    sizes = tuple(draw(st.lists(st.integers(1, 4), min_size=3, max_size=3)))
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    rf, rg = draw(st.integers(1, 3)), draw(st.integers(1, 3))
    return random_ctd(rng, sizes, rf), random_ctd(rng, sizes, rg), draw(st.integers(0, 2))


@given(_instances())
@settings(max_examples=200)
def test_normal_system_matches_flattened(inst):
    f, g, k = inst
    bk, rhs = build_normal_system(f, g, k)
    ak = khatri_rao_flatten(f, k)
    # each column of the flattened target is G with direction k fixed at j
    target = khatri_rao_flatten(g, k) @ np.diag(g.s) @ g.factors[k].T
    np.testing.assert_allclose(bk, ak.T @ ak, atol=1e-12)
    np.testing.assert_allclose(rhs, (ak.T @ target).T, atol=1e-12)
    lam = np.linalg.eigvalsh(bk)
    assert lam[0] >= -1e-12 * max(1.0, lam[-1])
    np.testing.assert_array_equal(bk, bk.T)


def test_hadamard_identity_filter(rng):
    # with one direction orthonormal the cross terms vanish and B_k is diagonal
    q, _ = np.linalg.qr(rng.standard_normal((6, 3)))
    others = [rng.standard_normal((4, 3)) for _ in range(2)]
    f = Ctd([others[0], q, others[1]], np.ones(3))
    for k in (0, 2):
        bk, _ = build_normal_system(f, f, k)
        np.testing.assert_allclose(bk, np.eye(3), atol=1e-13)
    bk, _ = build_normal_system(f, f, 1)
    assert np.abs(bk - np.diag(np.diag(bk))).max() > 1e-3


def test_solve_normal_and_degenerate(rng):
    a = rng.standard_normal((6, 3))
    b = a.T @ a
    c = rng.standard_normal((3, 5))
    coef, cond = solve_normal(b, (b @ c).T, 1e-14)
    np.testing.assert_allclose(coef, c, atol=1e-10)
    assert cond == pytest.approx(np.linalg.cond(b), rel=1e-8)
    with pytest.raises(DegenerateSolveError):
        solve_normal(np.zeros((2, 2)), np.ones((3, 2)), 1e-14)


def _fraction_solve(a, b):
    n = len(b)
    m = [row[:] + [b[i]] for i, row in enumerate(a)]
    for c in range(n):
        p = next(r for r in range(c, n) if m[r][c] != 0)
        m[c], m[p] = m[p], m[c]
        for r in range(n):
            if r != c and m[r][c] != 0:
                t = m[r][c] / m[c][c]
                m[r] = [x - t * y for x, y in zip(m[r], m[c])]
    return [m[i][n] / m[i][i] for i in range(n)]


def test_refinement_recovers_lost_digits(rng):
    # B = V diag(lam) V^T with lam spanning 1e12; the low part holds the
    # rounding error of the high part, so refinement sees the exact matrix
    v, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    lam = np.logspace(0, -12, 4)
    bhi = (v * lam) @ v.T
    fv = [[Fraction(float(x)) for x in row] for row in v]
    fl = [Fraction(float(x)) for x in lam]
    exact_b = [[sum(fv[i][k] * fl[k] * fv[j][k] for k in range(4)) for j in range(4)] for i in range(4)]
    blo = np.array([[float(exact_b[i][j] - Fraction(float(bhi[i, j]))) for j in range(4)] for i in range(4)])
    rhs = rng.standard_normal((1, 4))
    exact = _fraction_solve(exact_b, [Fraction(float(x)) for x in rhs[0]])
    exact = np.array([float(x) for x in exact])
    plain, _ = solve_normal(bhi, rhs, 1e-16)
    refined, _ = solve_normal_refined((bhi, blo), (rhs, np.zeros_like(rhs)), 1e-16, steps=3)
    err_plain = np.linalg.norm(plain[:, 0] - exact) / np.linalg.norm(exact)
    err_ref = np.linalg.norm(refined[:, 0] - exact) / np.linalg.norm(exact)
    assert err_ref < 1e-2 * err_plain


def _exact_spd(rng, lam):
    # exact B = V diag(lam) V^T as fractions, plus its double-double split
    n = len(lam)
    v, _ = np.linalg.qr(rng.standard_normal((n, n)))
    fv = [[Fraction(float(x)) for x in row] for row in v]
    fl = [Fraction(float(x)) for x in lam]
    exact = [[sum(fv[i][k] * fl[k] * fv[j][k] for k in range(n)) for j in range(n)] for i in range(n)]
    bhi = np.array([[float(x) for x in row] for row in exact])
    blo = np.array([[float(exact[i][j] - Fraction(float(bhi[i, j]))) for j in range(n)] for i in range(n)])
    return exact, bhi, blo


@pytest.mark.parametrize("span", [4, 12, 24])
def test_dd_solve_matches_exact(span, rng):
    exact_b, bhi, blo = _exact_spd(rng, np.logspace(0, -span, 6))
    rhs = rng.standard_normal((3, 6))
    coef = solve_normal_dd((bhi, blo), (rhs, np.zeros_like(rhs)))
    for col in range(3):
        exact = np.array([float(x) for x in _fraction_solve(exact_b, [Fraction(float(x)) for x in rhs[col]])])
        # double-double loses about kappa * 1e-32 relative accuracy
        assert np.linalg.norm(coef[:, col] - exact) <= 1e-6 * np.linalg.norm(exact)


def test_dd_solve_beats_refinement_near_float_limit(rng):
    exact_b, bhi, blo = _exact_spd(rng, np.logspace(0, -17, 5))
    rhs = rng.standard_normal((1, 5))
    exact = np.array([float(x) for x in _fraction_solve(exact_b, [Fraction(float(x)) for x in rhs[0]])])
    dd = solve_normal_dd((bhi, blo), (rhs, np.zeros_like(rhs)))[:, 0]
    refined = solve_normal_refined((bhi, blo), (rhs, np.zeros_like(rhs)), 1e-16, steps=2)[0][:, 0]
    scale = np.linalg.norm(exact)
    assert np.linalg.norm(dd - exact) < 1e-8 * scale
    assert np.linalg.norm(refined - exact) > 1e-2 * scale


def test_dd_solve_rejects_indefinite(rng):
    _, bhi, blo = _exact_spd(rng, np.array([1.0, 0.5, -0.25]))
    rhs = rng.standard_normal((2, 3))
    assert solve_normal_dd((bhi, blo), (rhs, np.zeros_like(rhs))) is None
    singular = np.diag([1.0, 1.0, 0.0])
    assert solve_normal_dd((singular, np.zeros((3, 3))), (rhs, np.zeros_like(rhs))) is None


def test_sweep_rank_one_target(rng):
    g = Ctd.random((5, 6, 7), 1, rng)
    f = Ctd.random((5, 6, 7), 1, rng)
    out, rep = als_sweep(f, g, AlsConfig())
    assert isinstance(rep, SweepReport) and len(rep.conds) == 3
    assert rep.residual < 1e-12
    assert relative_error(out, g) < 1e-12


def test_sweep_fixed_point(rng):
    g = random_ctd(rng, (4, 5, 3), 3)
    out, rep = als_sweep(g, g, AlsConfig())
    assert rep.residual < 1e-12
    assert out.rank == 3


def test_sweep_drops_degenerate_terms(rng):
    # F has a duplicated term and G is orthogonal to it in one direction, so
    # one coefficient column solves to exactly zero
    g = Ctd.rank_one([np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.array([1.0, 0.0])])
    e2 = np.array([[0.0], [1.0]])
    e1 = np.array([[1.0], [0.0]])
    f = Ctd([np.hstack([e1, e2]), np.hstack([e1, e2]), np.hstack([e1, e2])], [1.0, 1.0])
    with pytest.warns(RuntimeWarning, match="dropping"):
        out, rep = als_sweep(f, g, AlsConfig())
    assert out.rank == 1
    assert rep.residual < 1e-14


@pytest.mark.parametrize("seed", range(4))
def test_sine_residuals_non_increasing(seed):
    g = gen_sine_tensor(3, 16)
    _, reports = reduce(g, AlsConfig(epsilon=1e-10, max_rank=4, max_iter=60, rng_seed=seed))
    for prev, cur in zip(reports, reports[1:]):
        if cur.rank == prev.rank:
            assert cur.residual <= prev.residual + 1e-12


def test_reduce_exact_low_rank(rng):
    base = Ctd.random((4, 5, 6), 1, rng)
    g = Ctd([np.hstack([f] * 3) for f in base.factors], np.array([1.0, 2.0, 0.5]))
    assert g.rank == 3
    f, reports = reduce(g, AlsConfig(epsilon=1e-10))
    assert f.rank == 1
    assert reports[-1].converged
    assert relative_error(f, g) < 1e-10


def test_reduce_exact_rank_two(rng):
    g = random_ctd(rng, (6, 6, 6), 2)
    f, reports = reduce(g, AlsConfig(epsilon=1e-8, max_rank=4))
    assert reports[-1].converged
    assert f.rank <= 3
    for a in f.factors:
        np.testing.assert_allclose(np.linalg.norm(a, axis=0), 1.0, atol=1e-12)
    assert np.all(f.s > 0)


def test_reduce_deterministic(rng):
    g = random_ctd(rng, (5, 5, 5), 4)
    cfg = AlsConfig(epsilon=1e-6, max_rank=3, max_iter=20, rng_seed=7)
    f1, r1 = reduce(g, cfg)
    f2, r2 = reduce(g, cfg)
    assert [r.residual for r in r1] == [r.residual for r in r2]
    np.testing.assert_array_equal(f1.s, f2.s)


def test_reduce_not_converged_returns_best(rng):
    g = random_ctd(rng, (6, 6, 6), 5)
    f, reports = reduce(g, AlsConfig(epsilon=1e-12, max_rank=2, max_iter=15))
    assert not any(r.converged for r in reports)
    assert relative_error(f, g) == pytest.approx(min(r.residual for r in reports), rel=1e-8)
    assert max_condition(reports) >= 1.0


def test_warm_start_padded_to_start_rank(rng):
    g = random_ctd(rng, (5, 5, 5), 4)
    init = Ctd.random((5, 5, 5), 1, rng)
    _, reports = reduce(g, AlsConfig(epsilon=1e-14, start_rank=3, max_rank=3, max_iter=3), init=init)
    assert reports[0].rank == 3


def test_new_term_projection_never_increases(rng):
    g = random_ctd(rng, (5, 5, 5), 3)
    state = _State(Ctd.random((5, 5, 5), 1, rng), g)
    before = state.residual()
    for _ in range(5):
        state.add_random_term(rng, "projection")
        after = state.residual()
        assert after <= before + 1e-14
        before = after


@pytest.mark.parametrize(
    "kw",
    [
        {"epsilon": 0},
        {"stuck_tol": 0},
        {"max_rank": 0},
        {"start_rank": 5, "max_rank": 3},
        {"solver_rcond": 1.5},
        {"new_term": "other"},
        {"refine_steps": -1},
        {"residual_noise": 0},
    ],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        AlsConfig(**kw)
