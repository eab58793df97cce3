"""Condition numbers, operator-norm estimates and matrix inequality checks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .als import AlsConfig, reduce
from .ctd import Ctd, SeparatedOperator, apply_operator, norm, scale


class RankDeficientError(ValueError):
    pass


@dataclass(frozen=True)
class CondReport:
    sigma_max: float
    sigma_min: float
    kappa: float
    rank: int


def condition_number(a, rcond: float = 1e-15) -> CondReport:
    """Singular-value condition number; ``sigma_min`` is the smallest value above the cutoff."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    sv = np.linalg.svd(a, compute_uv=False)
    if sv.size == 0 or not sv[0] > 0:
        raise ValueError("condition number of a zero matrix")
    kept = sv[sv > rcond * sv[0]]
    return CondReport(float(sv[0]), float(kept[-1]), float(sv[0] / kept[-1]), int(kept.size))


@dataclass(frozen=True)
class BoundWitness:
    """Outcome of an inequality check, with the quantities that were compared."""

    holds: bool
    values: dict

    def __bool__(self):
        return self.holds


def _check_gram(m, name):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square")
    if not np.allclose(m, m.T, atol=1e-10, rtol=0):
        raise ValueError(f"{name} is not symmetric")
    if np.abs(np.diag(m) - 1.0).max() > 1e-10:
        raise ValueError(f"{name} must have unit diagonal")
    lam = np.linalg.eigvalsh(m)
    if lam[0] < -1e-10 * max(1.0, lam[-1]):
        raise ValueError(f"{name} is not positive semidefinite")
    return m, lam


def check_hadamard_gram_bound(a, b, slack: float = 1e-9) -> BoundWitness:
    """Eigenvalues of ``a * b`` (entrywise) lie within those of ``b``.

    Both inputs must be Gram matrices of unit vectors. When ``b`` is positive
    definite the condition number of the product is also bounded by that of
    ``b``. Eigenvalue comparisons use an absolute ``slack``, the
    condition-number comparison a relative one.
    """
    a, _ = _check_gram(a, "a")
    b, lb = _check_gram(b, "b")
    if a.shape != b.shape:
        raise ValueError("a and b differ in shape")
    lh = np.linalg.eigvalsh(a * b)
    ok = lb[0] - slack <= lh[0] and lh[-1] <= lb[-1] + slack
    vals = {"lam_min_b": lb[0], "lam_min_ab": lh[0], "lam_max_ab": lh[-1], "lam_max_b": lb[-1]}
    if lb[0] > slack:
        kb, kh = lb[-1] / lb[0], lh[-1] / lh[0]
        ok = ok and kh <= kb * (1.0 + slack)
        vals.update(kappa_b=kb, kappa_ab=kh)
    return BoundWitness(bool(ok), vals)


def check_product_cond_bound(a, b, slack: float = 1e-9) -> BoundWitness:
    """``kappa(AB) <= kappa(A) sigma_1(B) / sigma_min(P B)``.

    ``P = A^T (A A^T)^{-1} A`` projects onto the row space of ``A`` and is
    formed explicitly. ``A`` is ``r' x N`` with full row rank and ``B`` is
    ``N x r`` with full column rank, ``r <= r' <= N``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    rp, n = a.shape
    if b.shape[0] != n:
        raise ValueError("inner dimensions differ")
    r = b.shape[1]
    if not r <= rp <= n:
        raise ValueError("need r <= r' <= N")
    if np.linalg.matrix_rank(a) < rp or np.linalg.matrix_rank(b) < r:
        raise RankDeficientError("A and B must have full rank")
    pb = a.T @ np.linalg.solve(a @ a.T, a @ b)
    sv_pb = np.linalg.svd(pb, compute_uv=False)
    if sv_pb[-1] <= np.finfo(float).eps * sv_pb[0]:
        raise RankDeficientError("projection of B onto the row space of A is rank deficient")
    k_ab = condition_number(a @ b, rcond=0.0).kappa
    k_a = condition_number(a, rcond=0.0).kappa
    s1_b = np.linalg.norm(b, 2)
    bound = k_a * s1_b / sv_pb[-1]
    return BoundWitness(bool(k_ab <= bound * (1.0 + slack)), {"kappa_ab": k_ab, "bound": bound})


@dataclass(frozen=True)
class NormEstimate:
    value: float
    iterations: int
    converged: bool

    def __float__(self):
        return self.value


def power_method_norm(
    op: SeparatedOperator,
    tol: float = 1e-6,
    max_it: int = 500,
    *,
    eps_pm: float = 1e-6,
    rank_cap: int = 20,
    seed=0,
) -> NormEstimate:
    """Largest singular value of ``op`` by power iteration on CTD iterates.

    Symmetric operators are iterated directly; otherwise ``op^T op`` is used
    and the square root taken. Whenever an iterate exceeds ``rank_cap`` terms
    it is reduced with standard ALS to relative accuracy ``eps_pm``, warm
    started from the previous iterate. Stops when successive estimates agree
    to ``tol`` relative.
    """
    if not tol > 0 or max_it < 1:
        raise ValueError("need tol > 0 and max_it >= 1")
    rng = np.random.default_rng(seed)
    sym = op.is_symmetric()
    opt = None if sym else op.transpose()
    # warm-started reductions only need to track the iterate; a few sweeps do
    cfg = AlsConfig(
        epsilon=eps_pm,
        stuck_tol=eps_pm * 1e-2,
        max_rank=rank_cap,
        max_iter=10,
        residual_noise=eps_pm * 0.1,
    )
    x = Ctd.random(op.mode_sizes, 1, rng)
    x = scale(x, 1.0 / norm(x))
    est = prev = 0.0
    for it in range(1, max_it + 1):
        y = apply_operator(op, x)
        if not sym:
            y = apply_operator(opt, y)
        ny = norm(y)
        if ny == 0.0:
            return NormEstimate(0.0, it, True)
        est = ny if sym else np.sqrt(ny)
        if it > 1 and abs(est - prev) <= tol * est:
            return NormEstimate(float(est), it, True)
        prev = est
        y = scale(y, 1.0 / ny)
        if y.rank > rank_cap:
            init = x if x.rank <= rank_cap else None
            y, _ = reduce(y, cfg, init=init)
            y = scale(y, 1.0 / norm(y))
        x = y
    return NormEstimate(float(est), max_it, False)
