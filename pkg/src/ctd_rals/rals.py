"""Randomized ALS: least-squares systems sketched by random +/-1 tensors.

The normal matrix of direction ``k`` is replaced by the tall ``r' x r``
matrix ``prod_{i != k} R_i^T F_i`` (Hadamard product), solved in the
least-squares sense. A sweep that increases the residual is discarded and
retried with a fresh projection.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ._kernels import hadamard_except
from .als import NEW_TERM_WEIGHTS, DegenerateSolveError, SweepReport, _State
from .ctd import Ctd, ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RandAlsConfig:
    epsilon: float = 1e-5
    max_rank: int = 20
    max_iter: int = 1000
    max_tries: int = 50
    sketch_multiplier: int = 25
    rng_seed: int | None = 0
    solver_rcond: float = 1e-14
    start_rank: int = 1
    distribution: str = "bernoulli"
    new_term: str = "residual"
    residual_noise: float = 1e-13

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.max_rank < 1 or self.max_iter < 1 or self.max_tries < 1:
            raise ValueError("max_rank, max_iter and max_tries must be >= 1")
        if int(self.sketch_multiplier) != self.sketch_multiplier or self.sketch_multiplier < 2:
            raise ValueError("sketch_multiplier must be an integer >= 2")
        if not 0 < self.solver_rcond < 1:
            raise ValueError("solver_rcond must lie in (0, 1)")
        if not 1 <= self.start_rank <= self.max_rank:
            raise ValueError("start_rank must lie in [1, max_rank]")
        if self.distribution not in ("bernoulli", "gaussian"):
            raise ValueError("distribution must be 'bernoulli' or 'gaussian'")
        if not self.residual_noise > 0:
            raise ValueError("residual_noise must be > 0")
        if self.new_term not in NEW_TERM_WEIGHTS:
            raise ValueError(f"new_term must be one of {NEW_TERM_WEIGHTS}")

    def sketch_size(self, rank: int) -> int:
        return int(self.sketch_multiplier) * rank


@dataclass(frozen=True)
class RandomProjection:
    matrices: tuple
    seed: int | None

    @property
    def sketch_size(self) -> int:
        return self.matrices[0].shape[1]


def draw_projection(mode_sizes, r_prime: int, seed=None, distribution: str = "bernoulli"):
    """Independent ``M_i x r'`` random matrices, signed Bernoulli by default."""
    if r_prime < 1:
        raise ValueError("r' must be >= 1")
    rng = np.random.default_rng(seed)
    mats = []
    for m in mode_sizes:
        if distribution == "bernoulli":
            # one random bit per entry
            n = m * r_prime
            bits = np.unpackbits(rng.integers(0, 256, size=(n + 7) // 8, dtype=np.uint8))
            r = (2.0 * bits[:n] - 1.0).reshape(m, r_prime)
        else:
            r = rng.standard_normal((m, r_prime))
        r.flags.writeable = False
        mats.append(r)
    return RandomProjection(tuple(mats), seed)


def build_sketched_system(f: Ctd, g: Ctd, proj: RandomProjection, direction: int):
    """Return ``(B_k, rhs)``: ``B_k`` is ``r' x r_f``, ``rhs`` is ``M_k x r'``."""
    if f.mode_sizes != g.mode_sizes:
        raise ShapeError("mode sizes differ")
    if not 0 <= direction < f.dims:
        raise IndexError(f"direction {direction} out of range")
    pf = np.stack([r.T @ a for r, a in zip(proj.matrices, f.factors)])
    pg = np.stack([r.T @ b for r, b in zip(proj.matrices, g.factors)])
    return _sketched_system(pf, pg, g, direction)


def _sketched_system(pf, pg, g: Ctd, k: int):
    bk = hadamard_except(pf, k)
    w = hadamard_except(pg, k)
    rhs = g.factors[k] @ (g.s[:, None] * w.T)
    return bk, rhs


def solve_sketched(bk: np.ndarray, rhs: np.ndarray, rcond: float):
    """Least-squares solve of ``bk @ C = rhs.T`` via a truncated SVD.

    Returns ``(C, cond)`` with ``C`` of shape ``r_f x M_k``.
    """
    if bk.shape[0] < bk.shape[1]:
        raise ValueError("sketched matrix must have at least as many rows as columns")
    u, sv, vt = np.linalg.svd(bk, full_matrices=False)
    if sv.size == 0 or sv[0] == 0:
        raise DegenerateSolveError("sketched matrix is zero")
    keep = sv > rcond * sv[0]
    coef = vt[keep].T @ ((u[:, keep].T @ rhs.T) / sv[keep, None])
    return coef, float(sv[0] / sv[keep][-1])


class _SketchState(_State):
    """Iterate plus projected factor caches ``R_i^T F_i`` and ``R_i^T G_i``."""

    def set_projection(self, proj: RandomProjection):
        self.proj = proj
        self.pg = np.stack([r.T @ b for r, b in zip(proj.matrices, self.g.factors)])
        self.pf = np.stack([r.T @ a for r, a in zip(proj.matrices, self.factors)])

    def sweep(self, rcond: float) -> tuple:
        conds = []
        for k in range(len(self.factors)):
            bk, rhs = _sketched_system(self.pf, self.pg, self.g, k)
            coef, cond = solve_sketched(bk, rhs, rcond)
            conds.append(cond)
            before = self.rank
            self.update_direction(k, coef)
            if self.rank != before:
                self.set_projection(self.proj)
            self.pf[k] = self.proj.matrices[k].T @ self.factors[k]
        return tuple(conds)


def randomized_sweep(f: Ctd, g: Ctd, proj: RandomProjection, cfg: RandAlsConfig):
    """One sketched sweep; returns ``(candidate, report)`` without accept/reject."""
    if f.rank < 1:
        raise ValueError("f must have rank >= 1")
    state = _SketchState(f, g, cfg.residual_noise)
    state.set_projection(proj)
    conds = state.sweep(cfg.solver_rcond)
    return state.ctd(), SweepReport(1, state.rank, state.residual(), conds)


def _fresh(state: _SketchState, cfg: RandAlsConfig, rng):
    seed = int(rng.integers(2**63 - 1))
    state.set_projection(
        draw_projection(state.g.mode_sizes, cfg.sketch_size(state.rank), seed, cfg.distribution)
    )


def reduce_randomized(g: Ctd, cfg: RandAlsConfig, init: Ctd | None = None):
    """Randomized counterpart of :func:`ctd_rals.als.reduce`.

    A projection is drawn whenever the rank grows and after every rejected
    sweep. Rank grows when ``max_tries`` consecutive sweeps are rejected or
    ``max_iter`` sweeps are spent at the current rank. Returns
    ``(F, reports)``; rejected sweeps appear in ``reports`` with
    ``accepted=False``.
    """
    if g.rank < 1:
        raise ValueError("g must have rank >= 1")
    rng = np.random.default_rng(cfg.rng_seed)
    if init is None:
        init = Ctd.random(g.mode_sizes, cfg.start_rank, rng)
    state = _SketchState(init, g, cfg.residual_noise)
    reports: list[SweepReport] = []
    best_res, best = np.inf, None
    level = max(state.rank, cfg.start_rank)
    sweep_no = 0
    while level <= cfg.max_rank:
        while state.rank < level:
            state.add_random_term(rng, cfg.new_term)
        _fresh(state, cfg, rng)
        res = state.residual()
        tries = it = 1
        while it <= cfg.max_iter and tries <= cfg.max_tries:
            old = state.snapshot()
            try:
                conds = state.sweep(cfg.solver_rcond)
                cand = state.residual()
            except DegenerateSolveError as exc:
                log.debug("sketched solve failed: %s", exc)
                conds, cand = (), np.inf
            sweep_no += 1
            if cand < cfg.epsilon:
                reports.append(SweepReport(sweep_no, state.rank, cand, conds, converged=True))
                return state.ctd(), reports
            if res < cand:
                state.factors, state.s = old
                state.refresh()
                reports.append(SweepReport(sweep_no, state.rank, cand, conds, accepted=False))
                _fresh(state, cfg, rng)
                tries += 1
            else:
                res = cand
                reports.append(SweepReport(sweep_no, state.rank, cand, conds))
                if res < best_res:
                    best_res, best = res, state.snapshot()
                tries = 1
            it += 1
        level += 1
    if best is None:
        return state.ctd(), reports
    return Ctd(best[0], best[1], normalize=False), reports


def accepted_residuals(reports) -> np.ndarray:
    return np.array([r.residual for r in reports if r.accepted])
