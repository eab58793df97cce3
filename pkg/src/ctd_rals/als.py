"""Rank reduction by alternating least squares on the normal equations.

For direction ``k`` the normal matrix is the Hadamard product over ``i != k``
of the factor Gram matrices, so it never requires forming the Khatri-Rao
flattening. The same matrix is factored once per direction and reused for all
``M_k`` right-hand sides.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._kernels import (
    dd_gram,
    dd_hadamard_except,
    dd_quad_form,
    dd_cholesky_solve,
    dd_refine_residual,
    dd_rhs,
    hadamard_except,
)
from .ctd import (
    Ctd,
    ShapeError,
    dd_inner,
    dd_sum,
    fast_residual_ok,
    rounding_bound,
    squared_norm,
    stack_factors,
)

log = logging.getLogger(__name__)

NEW_TERM_WEIGHTS = ("residual", "projection")


@dataclass(frozen=True)
class AlsConfig:
    epsilon: float = 1e-5
    stuck_tol: float = 1e-8
    max_rank: int = 20
    max_iter: int = 1000
    rng_seed: int | None = 0
    solver_rcond: float = 1e-16
    start_rank: int = 1
    # iterative-refinement steps on the normal equations, applied when the
    # condition number of B_k, scaled up by max(s) / ||G|| when the terms are
    # large and cancelling, exceeds refine_cond; 0 disables refinement
    refine_steps: int = 2
    refine_cond: float = 1e8
    # above refine_cond, first try a Cholesky solve carried out entirely in
    # double-double; refinement is the fallback when B_k is not positive
    # definite at that precision
    dd_solve: bool = True
    # absolute accuracy demanded of each reported residual; the
    # double-double evaluation is used when plain floats cannot certify it
    residual_noise: float = 1e-13
    # s-value of the term added on a rank increase: "residual" or "projection"
    new_term: str = "residual"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.refine_steps < 0:
            raise ValueError("refine_steps must be >= 0")
        if not self.refine_cond >= 1:
            raise ValueError("refine_cond must be >= 1")
        if not self.residual_noise > 0:
            raise ValueError("residual_noise must be > 0")
        if self.new_term not in NEW_TERM_WEIGHTS:
            raise ValueError(f"new_term must be one of {NEW_TERM_WEIGHTS}")
        if not self.stuck_tol > 0:
            raise ValueError("stuck_tol must be > 0")
        if self.max_rank < 1 or self.max_iter < 1:
            raise ValueError("max_rank and max_iter must be >= 1")
        if not 0 < self.solver_rcond < 1:
            raise ValueError("solver_rcond must lie in (0, 1)")
        if not 1 <= self.start_rank <= self.max_rank:
            raise ValueError("start_rank must lie in [1, max_rank]")


@dataclass(frozen=True)
class SweepReport:
    """Outcome of one ALS sweep.

    ``conds`` holds the condition number of the least-squares matrix of each
    direction, in sweep order. ``accepted`` is always true for standard ALS;
    the randomized reducer records rejected sweeps with ``accepted=False``.
    ``converged`` is set on the final report of a run that met its tolerance.
    """

    iteration: int
    rank: int
    residual: float
    conds: tuple = field(default_factory=tuple)
    accepted: bool = True
    converged: bool = False

    @property
    def max_cond(self) -> float:
        return max(self.conds) if self.conds else 1.0


class DegenerateSolveError(RuntimeError):
    pass


def gram_matrix(f: Ctd, g: Ctd, direction: int) -> np.ndarray:
    """``r_f x r_g`` matrix of factor inner products in one direction."""
    if f.mode_sizes != g.mode_sizes:
        raise ShapeError("mode sizes differ")
    if not 0 <= direction < f.dims:
        raise IndexError(f"direction {direction} out of range")
    return f.factors[direction].T @ g.factors[direction]


def build_normal_system(f: Ctd, g: Ctd, direction: int):
    """Return ``(B_k, rhs)`` with ``rhs`` of shape ``M_k x r_f``.

    Row ``j`` of ``rhs`` is the right-hand side for entry ``j`` of direction
    ``k``, i.e. ``B_k c_j = rhs[j]``.
    """
    if f.mode_sizes != g.mode_sizes:
        raise ShapeError("mode sizes differ")
    if not 0 <= direction < f.dims:
        raise IndexError(f"direction {direction} out of range")
    if f.rank < 1:
        raise ValueError("f must have rank >= 1")
    ff = np.stack([a.T @ a for a in f.factors])
    gf = np.stack([b.T @ a for a, b in zip(f.factors, g.factors)])
    return _normal_system(ff, gf, g, direction)


def _normal_system(ff, gf, g: Ctd, k: int):
    bk = hadamard_except(ff, k)
    w = hadamard_except(gf, k)
    rhs = g.factors[k] @ (g.s[:, None] * w)
    return bk, rhs


def _sym_pinv(bk: np.ndarray, rcond: float):
    lam, vec = np.linalg.eigh(bk)
    mag = np.abs(lam)
    top = mag.max()
    if not top > 0:
        raise DegenerateSolveError("normal matrix is zero")
    keep = mag > rcond * top
    return vec[:, keep], lam[keep], float(top / mag[keep].min())


def solve_normal(bk: np.ndarray, rhs: np.ndarray, rcond: float):
    """Pseudo-inverse solve of the symmetric system ``bk @ C = rhs.T``.

    Returns ``(C, cond)`` where ``C`` is ``r x M_k`` and ``cond`` is the
    ratio of the largest to the smallest retained eigenvalue magnitude.
    """
    v, lam, cond = _sym_pinv(bk, rcond)
    return v @ ((v.T @ rhs.T) / lam[:, None]), cond


def solve_normal_refined(b_dd, rhs_dd, rcond: float, steps: int = 2):
    """:func:`solve_normal` followed by iterative refinement.

    ``b_dd`` and ``rhs_dd`` are ``(hi, lo)`` double-double pairs. Each step
    evaluates ``rhs.T - B C`` in double-double and adds the pseudo-inverse
    correction, which removes most of the rounding error that ``B`` and the
    right-hand side pick up in plain floating point.
    """
    bhi, blo = b_dd
    rhi, rlo = rhs_dd
    v, lam, cond = _sym_pinv(bhi, rcond)
    coef = v @ ((v.T @ rhi.T) / lam[:, None])
    for _ in range(steps):
        r = dd_refine_residual(rhi, rlo, bhi, blo, coef)
        coef = coef + v @ ((v.T @ r) / lam[:, None])
    return coef, cond


# pivots below this fraction of the largest diagonal entry are lost in
# double-double rounding
DD_PIVOT_TOL = 1e-30


def solve_normal_dd(b_dd, rhs_dd):
    """Cholesky solve of ``B C = rhs.T`` with every operation in double-double.

    Returns ``C`` (``r x M_k``), or ``None`` when ``B`` is not numerically
    positive definite at double-double precision.
    """
    (bhi, blo), (rhi, rlo) = b_dd, rhs_dd
    coef, ok = dd_cholesky_solve(bhi, blo, rhi, rlo, DD_PIVOT_TOL)
    return coef if ok else None


class _State:
    """Mutable working copy of the iterate and its Gram caches.

    Float Gram matrices ``ff[i] = F_i^T F_i`` and ``gf[i] = G_i^T F_i`` are
    kept current. Double-double copies are rebuilt lazily, per direction,
    only when a refined solve or a precise residual asks for them.
    """

    def __init__(self, f: Ctd, g: Ctd, noise_tol: float = 1e-13):
        self.g = g
        self.noise_tol = noise_tol
        self.factors = [np.array(a) for a in f.factors]
        self.s = np.array(f.s)
        self.gg = squared_norm(g)
        self._gg_dd = None
        self.refresh()

    def refresh(self):
        self.ff = np.stack([a.T @ a for a in self.factors])
        self.gf = np.stack([b.T @ a for a, b in zip(self.factors, self.g.factors)])
        self._dd = None

    def _ensure_dd(self):
        d = len(self.factors)
        if self._dd is None:
            self._dd = [np.empty_like(self.ff), np.empty_like(self.ff),
                        np.empty_like(self.gf), np.empty_like(self.gf)]
            self._dirty = set(range(d))
        ffh, ffl, gfh, gfl = self._dd
        for k in sorted(self._dirty):
            a = np.ascontiguousarray(self.factors[k])
            ffh[k], ffl[k] = dd_gram(a, a)
            gfh[k], gfl[k] = dd_gram(np.ascontiguousarray(self.g.factors[k]), a)
        self._dirty = set()
        return self._dd

    @property
    def rank(self):
        return self.s.size

    def ctd(self) -> Ctd:
        return Ctd(self.factors, self.s, normalize=False)

    def _gg_precise(self):
        if self._gg_dd is None:
            xg, off = stack_factors(self.g.factors)
            self._gg_dd = dd_inner(xg, self.g.s, xg, self.g.s, off)
        return self._gg_dd

    def residual(self) -> float:
        fg = self.g.s @ hadamard_except(self.gf, -1) @ self.s
        ff = self.s @ hadamard_except(self.ff, -1) @ self.s
        sq = (ff - 2.0 * fg + self.gg) / self.gg
        bound = rounding_bound(self.g.mode_sizes, self.s, self.g.s) / self.gg
        if fast_residual_ok(sq, bound, self.noise_tol):
            return float(np.sqrt(max(sq, 0.0)))
        ffh, ffl, gfh, gfl = self._ensure_dd()
        hff = dd_hadamard_except(ffh, ffl, -1)
        hgf = dd_hadamard_except(gfh, gfl, -1)
        qff = dd_quad_form(self.s, hff[0], hff[1], self.s)
        h, lo = dd_quad_form(self.g.s, hgf[0], hgf[1], self.s)
        sq = dd_sum(qff, (-2.0 * h, -2.0 * lo), self._gg_precise())
        return float(np.sqrt(max(sq / self.gg, 0.0)))

    def normal_system_dd(self, k: int):
        ffh, ffl, gfh, gfl = self._ensure_dd()
        b = dd_hadamard_except(ffh, ffl, k)
        w = dd_hadamard_except(gfh, gfl, k)
        gk = np.ascontiguousarray(self.g.factors[k])
        return b, dd_rhs(gk, np.ascontiguousarray(self.g.s), w[0], w[1])

    def update_direction(self, k: int, coef: np.ndarray):
        s = np.linalg.norm(coef, axis=1)
        dead = s <= np.finfo(float).tiny
        if dead.any():
            warnings.warn(
                f"dropping {int(dead.sum())} degenerate term(s) in direction {k}", RuntimeWarning
            )
            live = ~dead
            if not live.any():
                raise DegenerateSolveError("all terms collapsed to zero")
            coef, s = coef[live], s[live]
            self.factors = [a[:, live] for a in self.factors]
            self.ff = self.ff[:, live][:, :, live]
            self.gf = self.gf[:, :, live]
            self._dd = None
        self.s = s
        fk = (coef / s[:, None]).T
        self.factors[k] = fk
        self.ff[k] = fk.T @ fk
        self.gf[k] = self.g.factors[k].T @ fk
        if self._dd is not None:
            self._dirty.add(k)

    def add_random_term(self, rng, weight: str = "residual"):
        """Append a Gaussian rank-1 term.

        ``weight="residual"`` gives it s-value ``1e-2 * ||G - F||``, signed
        to point along the residual. ``weight="projection"`` uses the
        least-squares optimal weight, so adding the term never increases the
        residual.
        """
        cols = []
        for m in self.g.mode_sizes:
            c = rng.standard_normal(m)
            cols.append(c / np.linalg.norm(c))
        gt = np.prod([gk.T @ c for gk, c in zip(self.g.factors, cols)], axis=0)
        ft = np.prod([fk.T @ c for fk, c in zip(self.factors, cols)], axis=0)
        proj = float(self.g.s @ gt - self.s @ ft)
        small = 1e-2 * self.residual() * np.sqrt(self.gg)
        if weight == "residual":
            w = small
        elif weight == "projection":
            w = abs(proj) if abs(proj) > 1e-300 else small
        else:
            raise ValueError(f"unknown new-term weight {weight!r}")
        if proj < 0:
            cols[0] = -cols[0]
        self.factors = [np.hstack([a, c[:, None]]) for a, c in zip(self.factors, cols)]
        self.s = np.append(self.s, w)
        self.refresh()

    def snapshot(self):
        return [a.copy() for a in self.factors], self.s.copy()


def _sweep(state: _State, rcond: float, refine_steps: int = 0, refine_cond: float = np.inf,
           dd_solve: bool = False):
    conds = []
    for k in range(len(state.factors)):
        bk, rhs = _normal_system(state.ff, state.gf, state.g, k)
        coef, cond = solve_normal(bk, rhs, rcond)
        # float error in C is about cond * eps * max|s|, which matters once it
        # nears the residual; large cancelling s-values scale the trigger
        blowup = max(1.0, float(state.s.max()) / np.sqrt(state.gg))
        if cond * blowup > refine_cond and (refine_steps or dd_solve):
            b_dd, rhs_dd = state.normal_system_dd(k)
            precise = solve_normal_dd(b_dd, rhs_dd) if dd_solve else None
            if precise is not None:
                coef = precise
            elif refine_steps:
                coef, cond = solve_normal_refined(b_dd, rhs_dd, rcond, refine_steps)
        conds.append(cond)
        state.update_direction(k, coef)
    return tuple(conds)


def als_sweep(f: Ctd, g: Ctd, cfg: AlsConfig):
    """One ALS sweep over all directions; returns ``(updated, report)``."""
    if f.rank < 1:
        raise ValueError("f must have rank >= 1")
    state = _State(f, g, cfg.residual_noise)
    conds = _sweep(state, cfg.solver_rcond, cfg.refine_steps, cfg.refine_cond, cfg.dd_solve)
    res = state.residual()
    return state.ctd(), SweepReport(1, state.rank, res, conds)


def reduce(g: Ctd, cfg: AlsConfig, init: Ctd | None = None):
    """Find a low-rank ``F`` with ``||F - G|| / ||G|| < cfg.epsilon``.

    Starts from a random rank ``cfg.start_rank`` guess, or from ``init`` padded
    with random terms up to ``cfg.start_rank``, and grows
    the rank by one random term whenever the residual stalls by less than
    ``cfg.stuck_tol`` between sweeps. Returns ``(F, reports)``; if the target
    is never met the lowest-residual iterate is returned and no report carries
    ``converged=True``.
    """
    if g.rank < 1:
        raise ValueError("g must have rank >= 1")
    rng = np.random.default_rng(cfg.rng_seed)
    if init is None:
        init = Ctd.random(g.mode_sizes, cfg.start_rank, rng)
    state = _State(init, g, cfg.residual_noise)
    reports: list[SweepReport] = []
    best_res, best = np.inf, None
    level = max(state.rank, cfg.start_rank)
    sweep_no = 0
    while level <= cfg.max_rank:
        while state.rank < level:
            state.add_random_term(rng, cfg.new_term)
        res = state.residual()
        it = 1
        while it <= cfg.max_iter:
            res_old = res
            try:
                conds = _sweep(state, cfg.solver_rcond, cfg.refine_steps, cfg.refine_cond, cfg.dd_solve)
            except DegenerateSolveError as exc:
                log.warning("sweep failed at rank %d: %s", state.rank, exc)
                state = _State(Ctd.random(g.mode_sizes, level, rng), g, cfg.residual_noise)
                res = state.residual()
                it += 1
                continue
            res = state.residual()
            sweep_no += 1
            if res < best_res:
                best_res, best = res, state.snapshot()
            if res < cfg.epsilon:
                reports.append(SweepReport(sweep_no, state.rank, res, conds, converged=True))
                return state.ctd(), reports
            reports.append(SweepReport(sweep_no, state.rank, res, conds))
            if abs(res - res_old) < cfg.stuck_tol:
                break
            it += 1
        level += 1
    if best is None:
        return state.ctd(), reports
    return Ctd(best[0], best[1], normalize=False), reports


def max_condition(reports) -> float:
    return max((r.max_cond for r in reports), default=1.0)
