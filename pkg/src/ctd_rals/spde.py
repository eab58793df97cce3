"""Stochastic elliptic problem on the unit square as a separated tensor system.

Solves ``-div(a(x, z) grad u) = 1`` with ``u = 0`` on the boundary, where
``a(x, z) = a_0 + sigma_a sum_k sqrt(zeta_k) phi_k(x) z_k`` is a truncated
Karhunen-Loeve expansion of an exponentially correlated field. Collocation at
Gauss-Legendre points in each ``z_k`` turns the family of FE systems into one
tensor equation ``KK U = F``, solved by a damped fixed-point iteration whose
iterates are kept at low separation rank by ALS reduction.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from ._kernels import p1_stiffness_triplets
from .als import AlsConfig, max_condition, reduce
from .ctd import Ctd, SeparatedOperator, apply_operator, relative_error, scale
from .diagnostics import NormEstimate, power_method_norm
from .rals import RandAlsConfig, reduce_randomized

log = logging.getLogger(__name__)


class ContractionError(RuntimeError):
    """No damping constant could be certified to give a contraction."""


class DivergenceError(RuntimeError):
    """The fixed-point residual grew for too many consecutive iterations."""

    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


# ---------------------------------------------------------------------------
# mesh and finite elements
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FemMesh:
    """Uniform right-triangle mesh of the unit square.

    Nodes are numbered ``i + j (n + 1)`` for grid position ``(i h, j h)``.
    Every square is split along its lower-left to upper-right diagonal.
    ``interior`` lists the node numbers of the ``(n - 1)**2`` unknowns in
    the same order.
    """

    n: int
    coords: np.ndarray
    triangles: np.ndarray
    interior: np.ndarray

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def num_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def num_interior(self) -> int:
        return self.interior.size

    def element_areas(self) -> np.ndarray:
        p = self.coords[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def build_mesh(n: int) -> FemMesh:
    if int(n) != n or n < 2:
        raise ValueError("n must be an integer >= 2")
    n = int(n)
    t = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(t, t)  # row j is y = t[j]
    coords = np.column_stack([xx.ravel(), yy.ravel()])
    i, j = np.meshgrid(np.arange(n), np.arange(n))
    ll = (i + j * (n + 1)).ravel()
    lr, ul = ll + 1, ll + n + 1
    ur = ul + 1
    tris = np.vstack([np.column_stack([ll, lr, ur]), np.column_stack([ll, ur, ul])])
    ii, jj = np.meshgrid(np.arange(1, n), np.arange(1, n))
    interior = (ii + jj * (n + 1)).ravel()
    for a in (coords, tris, interior):
        a.flags.writeable = False
    return FemMesh(n, coords, tris.astype(np.int64), interior.astype(np.int64))


def assemble_stiffness(mesh: FemMesh, coef) -> sp.csr_matrix:
    """P1 stiffness matrix of ``-div(a grad u)`` on the interior nodes.

    ``coef`` holds nodal values of ``a`` at all mesh nodes (a scalar is
    broadcast); each element uses the mean of its three vertex values, which
    is the linear interpolant at the centroid.
    """
    coef = np.asarray(coef, dtype=float)
    if coef.ndim == 0:
        coef = np.full(mesh.num_nodes, float(coef))
    if coef.shape != (mesh.num_nodes,):
        raise ValueError(f"expected {mesh.num_nodes} nodal values, got {coef.shape}")
    elem = coef[mesh.triangles].mean(axis=1)
    rows, cols, vals = p1_stiffness_triplets(mesh.coords, mesh.triangles, elem)
    full = sp.coo_matrix((vals, (rows, cols)), shape=(mesh.num_nodes,) * 2).tocsr()
    k = full[mesh.interior][:, mesh.interior]
    return ((k + k.T) * 0.5).tocsr()


def load_vector(mesh: FemMesh, source: float = 1.0) -> np.ndarray:
    """Consistent P1 load of a constant source: area/3 per element vertex."""
    f = np.zeros(mesh.num_nodes)
    np.add.at(f, mesh.triangles.ravel(), np.repeat(mesh.element_areas() / 3.0, 3))
    return source * f[mesh.interior]


def gauss_legendre(m: int):
    """Gauss-Legendre abscissas and weights on ``[-1, 1]``."""
    if int(m) != m or m < 1:
        raise ValueError("m must be a positive integer")
    return np.polynomial.legendre.leggauss(int(m))


# ---------------------------------------------------------------------------
# Karhunen-Loeve expansion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KlExpansion:
    """Leading eigenpairs of ``C(x, y) = exp(-|x - y|_1 / l_c)`` on the unit square.

    ``modes`` holds the nodal values of ``phi_k`` at every mesh node, one row
    per mode. ``pool`` is the full sorted list of 2D eigenvalues that were
    formed. The 1D Nystrom data (``quad_x``, ``quad_w``, ``eig1d``,
    ``vec1d``) define ``phi_k`` everywhere and give the exact discrete inner
    product used by :meth:`gram`.
    """

    l_c: float
    eigenvalues: np.ndarray
    modes: np.ndarray
    pool: np.ndarray
    index_pairs: np.ndarray
    quad_x: np.ndarray
    quad_w: np.ndarray
    eig1d: np.ndarray
    vec1d: np.ndarray

    @property
    def d(self) -> int:
        return self.eigenvalues.size

    def gram(self) -> np.ndarray:
        """``<phi_i, phi_j>`` under the tensor Gauss-Legendre rule."""
        w = self.quad_w
        v = self.vec1d
        g1 = v.T @ (w[:, None] * v)
        a, b = self.index_pairs[: self.d, 0], self.index_pairs[: self.d, 1]
        return g1[np.ix_(a, a)] * g1[np.ix_(b, b)]


def _nystrom_1d(l_c, n_quad):
    x, w = np.polynomial.legendre.leggauss(n_quad)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    c = np.exp(-np.abs(x[:, None] - x[None, :]) / l_c)
    sw = np.sqrt(w)
    lam, psi = np.linalg.eigh(sw[:, None] * c * sw[None, :])
    order = np.argsort(lam)[::-1]
    lam = lam[order]
    vec = psi[:, order] / sw[:, None]  # nodal values, orthonormal in the w-inner product
    return x, w, lam, vec


def _nystrom_eval(t, l_c, x, w, lam, vec):
    """Evaluate 1D eigenfunctions at points ``t`` by Nystrom interpolation."""
    c = np.exp(-np.abs(t[:, None] - x[None, :]) / l_c)
    return (c * w[None, :]) @ vec / lam[None, :]


def kl_eigenpairs(mesh: FemMesh, l_c: float, d: int, *, pool: int = 400, n_quad: int = 512):
    """Top ``d`` eigenpairs of the separable exponential covariance.

    The kernel factors as ``exp(-|x1 - y1| / l_c) exp(-|x2 - y2| / l_c)``, so
    2D eigenpairs are products of 1D ones. 1D pairs come from a Nystrom
    discretization on ``n_quad`` Gauss-Legendre points; the ``pool`` largest
    products are kept and sorted.
    """
    if not l_c > 0:
        raise ValueError("l_c must be positive")
    if d < 1:
        raise ValueError("d must be >= 1")
    if pool < d:
        raise ValueError(f"d={d} exceeds the eigenvalue pool size {pool}")
    x, w, lam, vec = _nystrom_1d(l_c, n_quad)
    # (0, b) and (b, 0) are among the top products for b up to ``pool``
    m1 = min(n_quad, pool)
    prod = np.outer(lam[:m1], lam[:m1])
    flat = np.argsort(prod, axis=None, kind="stable")[::-1][:pool]
    pairs = np.column_stack(np.unravel_index(flat, prod.shape))
    zeta = prod.ravel()[flat]
    top = pairs[:d]
    used = np.unique(top)
    ex = _nystrom_eval(mesh.coords[:, 0], l_c, x, w, lam[used], vec[:, used])
    ey = _nystrom_eval(mesh.coords[:, 1], l_c, x, w, lam[used], vec[:, used])
    pos = {u: i for i, u in enumerate(used)}
    modes = np.stack([ex[:, pos[a]] * ey[:, pos[b]] for a, b in top])
    return KlExpansion(
        float(l_c), zeta[:d].copy(), modes, zeta, pairs, x, w, lam[:m1], vec[:, :m1]
    )


# ---------------------------------------------------------------------------
# tensor system
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpdeProblem:
    mesh: FemMesh
    kl: KlExpansion
    a0: float
    sigma_a: float
    stiffness: tuple
    abscissas: np.ndarray
    weights: np.ndarray
    operator: SeparatedOperator
    rhs: Ctd
    load: np.ndarray

    @property
    def d(self) -> int:
        return len(self.stiffness) - 1

    @property
    def mode_sizes(self):
        return self.operator.mode_sizes

    def nominal_solution(self) -> np.ndarray:
        return spsolve(self.stiffness[0].tocsc(), self.load)


def coefficient_min(kl: KlExpansion, a0: float, sigma_a: float) -> float:
    """Smallest value of ``a(x, z)`` over mesh nodes and corners ``z in {-1, 1}^d``."""
    amp = sigma_a * np.sqrt(kl.eigenvalues)[:, None] * kl.modes
    return float((a0 - np.abs(amp).sum(axis=0)).min())


def build_problem(mesh: FemMesh, kl: KlExpansion, m: int, a0: float, sigma_a: float) -> SpdeProblem:
    """Assemble ``KK = K_0 x I x ... x I + sum_k K_k x (D at slot k)`` and ``F``.

    ``D = diag(z)`` holds the Gauss-Legendre abscissas. Direction 0 is
    spatial; directions ``1..d`` are the stochastic variables.
    """
    if sigma_a < 0 or not a0 > 0:
        raise ValueError("need a0 > 0 and sigma_a >= 0")
    amin = coefficient_min(kl, a0, sigma_a)
    if not amin > 0:
        raise ValueError(f"coefficient is not positive on all corners (min {amin:.3g})")
    d = kl.d
    z, w = gauss_legendre(m)
    ks = [assemble_stiffness(mesh, a0)]
    for k in range(d):
        ks.append(assemble_stiffness(mesh, sigma_a * np.sqrt(kl.eigenvalues[k]) * kl.modes[k]))
    eye = sp.identity(m, format="csr")
    dz = sp.diags(z).tocsr()
    blocks = [list(ks)]
    for k in range(1, d + 1):
        blocks.append([dz if l == k else eye for l in range(d + 1)])
    op = SeparatedOperator(blocks, np.ones(d + 1))
    f = load_vector(mesh)
    rhs = Ctd.rank_one([f] + [np.ones(m)] * d)
    return SpdeProblem(mesh, kl, float(a0), float(sigma_a), tuple(ks), z, w, op, rhs, f)


@dataclass(frozen=True)
class DampingChoice:
    c: float
    operator_norm: NormEstimate
    contraction: NormEstimate
    halvings: int


def choose_damping(
    op: SeparatedOperator, pm_tol: float = 1e-6, *, safety: float = 1.05, max_it: int = 300, seed=0
) -> DampingChoice:
    """``c = 1 / (safety * ||KK||)``, certified by estimating ``||I - c KK|| < 1``.

    If the certificate fails, ``c`` is halved up to ten times.
    """
    nu = power_method_norm(op, pm_tol, max_it, seed=seed)
    if not nu.value > 0:
        raise ContractionError("operator norm estimate is zero")
    c = 1.0 / (safety * nu.value)
    for halvings in range(11):
        est = power_method_norm(op.identity_minus(c), pm_tol, max_it, seed=seed)
        if est.value < 1.0:
            return DampingChoice(c, nu, est, halvings)
        log.warning("||I - cK|| estimate %.6f >= 1 for c=%.3e; halving", est.value, c)
        c *= 0.5
    raise ContractionError("could not certify ||I - cK|| < 1")


# ---------------------------------------------------------------------------
# fixed-point iteration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FixedPointConfig:
    """Settings for the reduction-interleaved fixed-point solve.

    ``reducer_cfg`` is an :class:`AlsConfig` or :class:`RandAlsConfig`
    (defaults are built from ``epsilon`` and ``max_rank`` when omitted).
    ``c`` may be a number or ``"auto"``. With ``warm_start`` the reduction
    starts from the previous iterate instead of a random rank-1 guess.
    """

    mu: float = 1e-6
    epsilon: float = 1e-3
    c: float | str = "auto"
    max_iter: int = 100
    max_rank: int = 60
    reducer: str = "standard"
    reducer_cfg: AlsConfig | RandAlsConfig | None = None
    init: str = "nominal"
    warm_start: bool = False
    seed: int = 0
    pm_tol: float = 1e-6
    divergence_window: int = 5
    divergence_slack: float = 0.1

    def __post_init__(self):
        if not self.mu > 0 or not self.epsilon > 0:
            raise ValueError("mu and epsilon must be > 0")
        if self.reducer not in ("standard", "randomized"):
            raise ValueError("reducer must be 'standard' or 'randomized'")
        if self.init not in ("nominal", "random"):
            raise ValueError("init must be 'nominal' or 'random'")
        if self.c != "auto" and not (isinstance(self.c, (int, float)) and self.c > 0):
            raise ValueError("c must be 'auto' or a positive number")
        if self.max_iter < 1 or self.max_rank < 1 or self.divergence_window < 1:
            raise ValueError("max_iter, max_rank and divergence_window must be >= 1")
        if not self.divergence_slack >= 0:
            raise ValueError("divergence_slack must be >= 0")

    def make_reducer_cfg(self, seed):
        base = self.reducer_cfg
        if base is None:
            base = AlsConfig() if self.reducer == "standard" else RandAlsConfig()
            # residuals are only compared against epsilon here
            base = replace(
                base,
                epsilon=self.epsilon,
                max_rank=self.max_rank,
                residual_noise=self.epsilon * 1e-2,
            )
        return replace(base, rng_seed=seed)


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    residual: float
    rank: int
    pre_rank: int
    max_cond: float
    sweeps: int


@dataclass
class FixedPointResult:
    solution: Ctd
    history: list = field(default_factory=list)
    damping: float = float("nan")
    contraction: float = float("nan")
    converged: bool = False

    @property
    def final_residual(self) -> float:
        return self.history[-1].residual

    @property
    def peak_rank(self) -> int:
        return max(h.rank for h in self.history)

    @property
    def max_cond(self) -> float:
        return max((h.max_cond for h in self.history), default=1.0)


def _reduce(g, cfg, init, trace):
    if isinstance(cfg, RandAlsConfig):
        out, reports = reduce_randomized(g, cfg, init)
    else:
        out, reports = reduce(g, cfg, init)
    if trace is not None:
        trace(reports)
    return out, reports


def fixed_point_solve(problem: SpdeProblem, cfg: FixedPointConfig, *, trace=None) -> FixedPointResult:
    """Damped iteration ``U <- tau_eps(c (F - KK U) + U)`` until ``res <= mu``.

    ``res = ||F - KK U|| / ||F||``. The damping constant is certified (or
    chosen, for ``c="auto"``) before the first step. ``trace`` is called with
    the sweep reports of every reduction.
    """
    op, f = problem.operator, problem.rhs
    if cfg.c == "auto":
        choice = choose_damping(op, cfg.pm_tol, seed=cfg.seed)
        c, contraction = choice.c, choice.contraction.value
    else:
        c = float(cfg.c)
        contraction = power_method_norm(op.identity_minus(c), cfg.pm_tol, 300, seed=cfg.seed).value
        if not contraction < 1.0:
            raise ContractionError(f"||I - cK|| estimate {contraction:.6f} >= 1 for c={c}")
    rng = np.random.default_rng(cfg.seed)
    if cfg.init == "nominal":
        m = problem.abscissas.size
        u = Ctd.rank_one([problem.nominal_solution()] + [np.ones(m)] * problem.d)
    else:
        u = Ctd.random(problem.mode_sizes, 1, rng)
    ku = apply_operator(op, u)
    res = relative_error(ku, f)
    result = FixedPointResult(u, [IterationRecord(0, res, u.rank, u.rank, 1.0, 0)], c, contraction)
    growth = 0
    best = res
    it = 0
    while res > cfg.mu and it < cfg.max_iter:
        it += 1
        step = u + scale(f - ku, c)
        expected = f.rank + (problem.d + 2) * u.rank
        if step.rank != expected:
            log.debug("pre-truncation rank %d, nominal %d", step.rank, expected)
        rcfg = cfg.make_reducer_cfg(int(rng.integers(2**31 - 1)))
        init = u if cfg.warm_start else None
        u, reports = _reduce(step, rcfg, init, trace)
        ku = apply_operator(op, u)
        new = relative_error(ku, f)
        growth = growth + 1 if new > res else 0
        res = new
        best = min(best, res)
        result.history.append(
            IterationRecord(it, res, u.rank, step.rank, max_condition(reports), len(reports))
        )
        result.solution = u
        rec = result.history[-1]
        log.info("iter %d res %.3e rank %d kappa %.2e sweeps %d", it, res, u.rank, rec.max_cond, rec.sweeps)
        # truncation noise makes short runs of tiny increases normal
        if growth >= cfg.divergence_window and res > (1.0 + cfg.divergence_slack) * best:
            raise DivergenceError(
                f"residual grew for {growth} consecutive iterations (now {res:.3e})", result.history
            )
    result.converged = res <= cfg.mu
    return result


def rank_after_step(problem: SpdeProblem, u: Ctd, c: float) -> int:
    """Separation rank of ``c (F - KK U) + U`` before any reduction."""
    ku = apply_operator(problem.operator, u)
    return (u + scale(problem.rhs - ku, c)).rank


def dense_solve(problem: SpdeProblem, cap: int = 20_000) -> np.ndarray:
    """Direct solve of every collocated FE system; returns the full tensor grid.

    Test oracle only. Output shape is ``(N, M, ..., M)``.
    """
    n = problem.mesh.num_interior
    m = problem.abscissas.size
    d = problem.d
    total = n * m**d
    if total > cap:
        raise ValueError(f"{total} unknowns exceeds the dense cap {cap}")
    out = np.empty((n,) + (m,) * d)
    for idx in np.ndindex(*(m,) * d):
        z = problem.abscissas[list(idx)]
        k = problem.stiffness[0] + sum(zk * kk for zk, kk in zip(z, problem.stiffness[1:]))
        out[(slice(None),) + idx] = spsolve(k.tocsc(), problem.load)
    return out
