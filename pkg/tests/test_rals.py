import numpy as np
import pytest
from conftest import random_ctd
from hypothesis import given, settings
from hypothesis import strategies as st

from ctd_rals.als import DegenerateSolveError, build_normal_system
from ctd_rals.ctd import Ctd, khatri_rao_flatten, relative_error
from ctd_rals.diagnostics import condition_number
from ctd_rals.rals import (
    RandAlsConfig,
    accepted_residuals,
    build_sketched_system,
    draw_projection,
    randomized_sweep,
    reduce_randomized,
    solve_sketched,
)


def test_projection_entries_and_determinism():
    a = draw_projection((5, 7, 3), 12, seed=3)
    b = draw_projection((5, 7, 3), 12, seed=3)
    assert a.sketch_size == 12
    for x, y, m in zip(a.matrices, b.matrices, (5, 7, 3)):
        assert x.shape == (m, 12)
        np.testing.assert_array_equal(x, y)
        assert set(np.unique(x)) <= {-1.0, 1.0}
    c = draw_projection((5, 7, 3), 12, seed=4)
    assert any((x != y).any() for x, y in zip(a.matrices, c.matrices))


def test_projection_mean_and_balance():
    r = draw_projection((100,), 100, seed=0).matrices[0]
    assert -0.05 < r.mean() < 0.05
    # neighbouring entries come from neighbouring bits; they must not correlate
    flat = r.reshape(-1)
    assert abs(np.mean(flat[1:] * flat[:-1])) < 0.05


def test_projection_gaussian_and_errors():
    g = draw_projection((4,), 6, seed=0, distribution="gaussian").matrices[0]
    assert not set(np.unique(g)) <= {-1.0, 1.0}
    with pytest.raises(ValueError):
        draw_projection((4,), 0, seed=0)


def test_sketched_rank_one_d2(rng):
    f = Ctd.random((4, 6), 1, rng)
    g = random_ctd(rng, (4, 6), 2)
    proj = draw_projection((4, 6), 25, seed=1)
    bk, rhs = build_sketched_system(f, g, proj, 0)
    assert bk.shape == (25, 1) and rhs.shape == (4, 25)
    np.testing.assert_allclose(bk[:, 0], proj.matrices[1].T @ f.factors[1][:, 0], atol=1e-13)


@st.composite
def _instances(draw):
    sizes = tuple(draw(st.lists(st.integers(1, 4), min_size=3, max_size=3)))
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    rf, rg = draw(st.integers(1, 3)), draw(st.integers(1, 3))
    r_prime = draw(st.integers(rf, 12))
    k = draw(st.integers(0, 2))
    proj = draw_projection(sizes, r_prime, seed=int(rng.integers(2**31)))
    return random_ctd(rng, sizes, rf), random_ctd(rng, sizes, rg), proj, k


def _flat_projection(proj, k):
    """``R_k``: column l is the flattened rank-1 tensor of column l of every R_i, i != k."""
    mats = [r for i, r in enumerate(proj.matrices) if i != k]
    out = mats[0]
    for m in mats[1:]:
        out = np.einsum("al,bl->abl", out, m).reshape(-1, out.shape[1])
    return out


@given(_instances())
@settings(max_examples=200)
def test_sketched_system_matches_flattened(inst):
    f, g, proj, k = inst
    bk, rhs = build_sketched_system(f, g, proj, k)
    rk = _flat_projection(proj, k)
    ak = khatri_rao_flatten(f, k)
    target = khatri_rao_flatten(g, k) @ np.diag(g.s) @ g.factors[k].T
    scale = max(1.0, np.abs(rk).sum(axis=0).max())
    np.testing.assert_allclose(bk, rk.T @ ak, atol=1e-12 * scale)
    np.testing.assert_allclose(rhs, (rk.T @ target).T, atol=1e-12 * scale * max(1.0, g.s.sum()))


def test_sketch_expectation_is_normal_matrix(rng):
    f = random_ctd(rng, (6, 5, 7), 3)
    g = random_ctd(rng, (6, 5, 7), 2)
    b_als, _ = build_normal_system(f, g, 1)
    acc = np.zeros_like(b_als)
    n, r_prime = 2000, 10
    for seed in range(n):
        bk, _ = build_sketched_system(f, g, draw_projection(f.mode_sizes, r_prime, seed), 1)
        acc += bk.T @ bk
    np.testing.assert_allclose(acc / (n * r_prime), b_als, atol=0.05 * np.abs(b_als).max(), rtol=0.05)


def test_solve_sketched_cases(rng):
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    c = rng.standard_normal((4, 3))
    coef, cond = solve_sketched(q, (q @ c).T, 1e-14)
    np.testing.assert_allclose(coef, c, atol=1e-13)
    assert cond == pytest.approx(1.0)

    b = rng.standard_normal((30, 5))
    c = rng.standard_normal((5, 7))
    coef, _ = solve_sketched(b, (b @ c).T, 1e-14)
    np.testing.assert_allclose(coef, c, atol=1e-12)

    u, _ = np.linalg.qr(rng.standard_normal((6, 3)))
    v, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    b = u @ np.diag([1.0, 0.5, 1e-18]) @ v.T
    y = rng.standard_normal((6, 2))
    coef, cond = solve_sketched(b, y.T, 1e-14)
    assert cond == pytest.approx(2.0)
    # minimum-norm: no component along the dropped right singular vector
    np.testing.assert_allclose(v[:, 2] @ coef, 0.0, atol=1e-12)
    expect = v[:, :2] @ np.diag([1.0, 2.0]) @ u[:, :2].T @ y
    np.testing.assert_allclose(coef, expect, atol=1e-12)

    with pytest.raises(ValueError):
        solve_sketched(np.ones((2, 3)), np.ones((1, 2)), 1e-14)
    with pytest.raises(DegenerateSolveError):
        solve_sketched(np.zeros((3, 2)), np.ones((1, 3)), 1e-14)


def test_randomized_sweep_fixed_point(rng):
    g = random_ctd(rng, (5, 4, 6), 3)
    cfg = RandAlsConfig()
    proj = draw_projection(g.mode_sizes, cfg.sketch_size(g.rank), seed=2)
    out, rep = randomized_sweep(g, g, proj, cfg)
    assert rep.residual <= 1e-10
    assert all(np.isfinite(c) and c >= 1.0 for c in rep.conds)


def test_randomized_sweep_rank_one_target():
    cfg = RandAlsConfig()
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        g = Ctd.random((8, 9, 10), 1, rng)
        f = Ctd.random((8, 9, 10), 1, rng)
        for sweep in range(3):
            proj = draw_projection(g.mode_sizes, 25, seed=rng.integers(2**31))
            f, rep = randomized_sweep(f, g, proj, cfg)
            if rep.residual < 1e-10:
                hits += 1
                break
    assert hits >= 95


def test_reduce_randomized_rank_one_target(rng):
    g = Ctd.random((6, 7, 8), 1, rng)
    f, reports = reduce_randomized(g, RandAlsConfig(epsilon=1e-10))
    assert f.rank == 1
    assert reports[-1].converged
    assert relative_error(f, g) < 1e-10


def test_reduce_randomized_streams(rng):
    g = random_ctd(rng, (6, 6, 6), 5)
    cfg = RandAlsConfig(epsilon=1e-12, max_rank=3, max_iter=30, max_tries=5, rng_seed=11)
    f, reports = reduce_randomized(g, cfg)
    assert any(not r.accepted for r in reports)
    for level in {r.rank for r in reports}:
        res = accepted_residuals([r for r in reports if r.rank == level])
        assert np.all(np.diff(res) <= 0)
    assert relative_error(f, g) == pytest.approx(accepted_residuals(reports).min(), rel=1e-8)
    f2, reports2 = reduce_randomized(g, cfg)
    assert [r.residual for r in reports] == [r.residual for r in reports2]


def test_empirical_condition_bound(rng):
    f = random_ctd(rng, (8, 8, 8), 4)
    r = f.rank
    r_prime = 25 * r
    b_als, _ = build_normal_system(f, f, 0)
    target = np.sqrt(condition_number(b_als).kappa)
    ratio = np.sqrt(r / r_prime)
    c_emp = (1 + ratio) / (1 - ratio)
    ok = 0
    for seed in range(500):
        bk, _ = build_sketched_system(f, f, draw_projection(f.mode_sizes, r_prime, seed), 0)
        ok += condition_number(bk).kappa <= c_emp * target
    print(f"kappa bound held in {ok}/500 draws")
    assert ok / 500 >= 0.5


@pytest.mark.parametrize(
    "kw",
    [
        {"epsilon": -1},
        {"max_tries": 0},
        {"sketch_multiplier": 1},
        {"sketch_multiplier": 2.5},
        {"distribution": "uniform"},
        {"start_rank": 0},
    ],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        RandAlsConfig(**kw)
