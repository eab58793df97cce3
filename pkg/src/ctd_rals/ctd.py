"""Canonical tensor decompositions (CTDs) and separated operators.

A CTD stores ``sum_l s_l F_1^l o ... o F_d^l`` as one ``M_k x r`` factor matrix
per direction with unit-norm columns, plus positive s-values. Multi-indices are
row-major with direction 0 slowest everywhere (dense expansion, Khatri-Rao
flattening, dense operators).
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.sparse as sp

from ._kernels import _two_sum_np, dd_gram_product, dd_quad_form, hadamard_except

ORACLE_CAP = 10**6
_TINY = np.finfo(float).tiny
_EPS = np.finfo(float).eps
# absolute noise tolerated on a relative residual before switching to the
# double-double evaluation
RESIDUAL_NOISE_TOL = 1e-13


class ShapeError(ValueError):
    """Raised when tensors or operators have incompatible shapes."""


class OracleCapError(ValueError):
    """Raised when a dense expansion would exceed the oracle size cap."""


def _freeze(a):
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


class Ctd:
    """A rank-``r`` canonical tensor decomposition.

    Parameters
    ----------
    factors : sequence of array_like
        One ``M_k x r`` matrix per direction. Columns need not be normalized;
        their norms are folded into the s-values.
    s_values : array_like
        Length-``r`` weights. Negative weights are absorbed by flipping the
        sign of the direction-0 column; terms with a zero weight or a zero
        column are dropped.

    Instances are immutable; every operation returns a new object.
    """

    __slots__ = ("factors", "s")

    def __init__(self, factors: Sequence[np.ndarray], s_values, *, normalize: bool = True):
        factors = [np.array(f, dtype=float, ndmin=2) for f in factors]
        if not factors:
            raise ShapeError("a CTD needs at least one direction")
        s = np.array(s_values, dtype=float).reshape(-1)
        r = s.size
        for k, f in enumerate(factors):
            if f.ndim != 2 or f.shape[1] != r:
                raise ShapeError(f"factor {k} has shape {f.shape}, expected (M_{k}, {r})")
        if normalize and r:
            norms = np.stack([np.linalg.norm(f, axis=0) for f in factors])
            s = s * np.prod(norms, axis=0)
            keep = (norms.min(axis=0) > _TINY) & (np.abs(s) > _TINY)
            if not keep.all():
                factors = [f[:, keep] for f in factors]
                norms = norms[:, keep]
                s = s[keep]
            factors = [f / n for f, n in zip(factors, norms)]
            neg = s < 0
            if neg.any():
                factors[0][:, neg] *= -1.0
                s = np.abs(s)
        self.factors = tuple(_freeze(f) for f in factors)
        self.s = _freeze(s)

    # -- basic properties -------------------------------------------------
    @property
    def dims(self) -> int:
        return len(self.factors)

    @property
    def mode_sizes(self) -> tuple[int, ...]:
        return tuple(f.shape[0] for f in self.factors)

    @property
    def rank(self) -> int:
        return self.s.size

    @property
    def s_values(self) -> np.ndarray:
        return self.s

    def __repr__(self):
        return f"Ctd(mode_sizes={self.mode_sizes}, rank={self.rank})"

    # -- sugar ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, negate(other))

    def __neg__(self):
        return negate(self)

    def __mul__(self, alpha):
        return scale(self, alpha)

    __rmul__ = __mul__

    # -- constructors -----------------------------------------------------
    @classmethod
    def zeros(cls, mode_sizes: Sequence[int]) -> "Ctd":
        return cls([np.zeros((m, 0)) for m in mode_sizes], np.zeros(0), normalize=False)

    @classmethod
    def random(cls, mode_sizes: Sequence[int], rank: int, rng=None, s_values=None) -> "Ctd":
        """Gaussian factors, normalized columns, unit s-values unless given."""
        rng = np.random.default_rng(rng)
        factors = [rng.standard_normal((m, rank)) for m in mode_sizes]
        factors = [f / np.linalg.norm(f, axis=0) for f in factors]
        s = np.ones(rank) if s_values is None else s_values
        return cls(factors, s, normalize=False)

    @classmethod
    def rank_one(cls, vectors: Sequence[np.ndarray], s: float = 1.0) -> "Ctd":
        return cls([np.asarray(v, dtype=float).reshape(-1, 1) for v in vectors], [s])


def _check_same_shape(a: Ctd, b: Ctd):
    if a.mode_sizes != b.mode_sizes:
        raise ShapeError(f"mode sizes differ: {a.mode_sizes} vs {b.mode_sizes}")


def add(a: Ctd, b: Ctd) -> Ctd:
    """Concatenate the terms of ``a`` and ``b`` (no recompression)."""
    _check_same_shape(a, b)
    factors = [np.hstack([fa, fb]) for fa, fb in zip(a.factors, b.factors)]
    return Ctd(factors, np.concatenate([a.s, b.s]), normalize=False)


def scale(a: Ctd, alpha: float) -> Ctd:
    if alpha == 0:
        return Ctd.zeros(a.mode_sizes)
    factors = list(a.factors)
    if alpha < 0:
        factors[0] = -factors[0]
    return Ctd(factors, a.s * abs(alpha), normalize=False)


def negate(a: Ctd) -> Ctd:
    """Flip the sign of every direction-0 column; s-values stay positive."""
    return scale(a, -1.0)


def gram_stack(a: Ctd, b: Ctd) -> np.ndarray:
    """``out[i] = a.factors[i].T @ b.factors[i]``, shape ``(d, r_a, r_b)``."""
    _check_same_shape(a, b)
    return np.stack([fa.T @ fb for fa, fb in zip(a.factors, b.factors)])


def inner(a: Ctd, b: Ctd) -> float:
    _check_same_shape(a, b)
    if a.rank == 0 or b.rank == 0:
        return 0.0
    return float(a.s @ hadamard_except(gram_stack(a, b), -1) @ b.s)


def squared_norm(a: Ctd) -> float:
    """``||a||^2``, recomputed in double-double when its terms cancel."""
    sq = inner(a, a)
    if a.rank and rounding_bound(a.mode_sizes, a.s, ()) > 1e-10 * abs(sq):
        x, off = stack_factors(a.factors)
        sq = dd_sum(dd_inner(x, a.s, x, a.s, off))
    return sq


def norm(a: Ctd) -> float:
    return float(np.sqrt(max(squared_norm(a), 0.0)))


def relative_error(f: Ctd, g: Ctd) -> float:
    """``||f - g|| / ||g||``, falling back to double-double when needed."""
    _check_same_shape(f, g)
    gg = squared_norm(g)
    if gg <= 0:
        raise ZeroDivisionError("relative error against a zero tensor")
    sq = (inner(f, f) - 2.0 * inner(f, g) + gg) / gg
    bound = rounding_bound(f.mode_sizes, f.s, g.s) / gg
    if not fast_residual_ok(sq, bound):
        sq = precise_sq_distance(f.factors, f.s, g.factors, g.s) / gg
    return float(np.sqrt(max(sq, 0.0)))


def rounding_bound(mode_sizes, fs, gs) -> float:
    """Rounding-error estimate for ``||F - G||^2`` evaluated from float Grams.

    Accumulated errors are treated as a random walk, hence the square root.
    """
    c = np.sqrt(len(mode_sizes) + max(mode_sizes))
    return c * _EPS * (np.abs(fs).sum() + np.abs(gs).sum()) ** 2


def fast_residual_ok(sq_rel: float, bound_rel: float, tol: float = RESIDUAL_NOISE_TOL) -> bool:
    """True when a float residual ``sqrt(sq_rel)`` is accurate to ``tol``."""
    floor = max(sq_rel, bound_rel, 1e-300)
    return bound_rel / (2.0 * np.sqrt(floor)) <= tol


def stack_factors(factors):
    """Row-stack factor matrices; returns ``(X, offsets)`` for the dd kernels."""
    offsets = np.zeros(len(factors) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([f.shape[0] for f in factors])
    return np.ascontiguousarray(np.vstack(factors)), offsets


def dd_inner(xa, sa, xb, sb, offsets):
    """Double-double ``(hi, lo)`` of the inner product of two stacked CTDs."""
    if xa.shape[1] == 0 or xb.shape[1] == 0:
        return 0.0, 0.0
    hi, lo = dd_gram_product(xa, xb, offsets)
    return dd_quad_form(np.ascontiguousarray(sa), hi, lo, np.ascontiguousarray(sb))


def dd_sum(*terms) -> float:
    """Sum double-double pairs and return the rounded float."""
    hi, lo = 0.0, 0.0
    for th, tl in terms:
        hi, t = _two_sum_np(hi, th)
        lo += t + tl
    return hi + lo


def precise_sq_distance(ffac, fs, gfac, gs, gg_dd=None) -> float:
    """``||F - G||^2`` with Gram entries and sums carried in double-double."""
    xf, off = stack_factors(ffac)
    xg, _ = stack_factors(gfac)
    fs = np.asarray(fs, dtype=float)
    gs = np.asarray(gs, dtype=float)
    qff = dd_inner(xf, fs, xf, fs, off)
    h, l = dd_inner(xg, gs, xf, fs, off)
    qgg = dd_inner(xg, gs, xg, gs, off) if gg_dd is None else gg_dd
    return dd_sum(qff, (-2.0 * h, -2.0 * l), qgg)


def khatri_rao(mats: Sequence[np.ndarray]) -> np.ndarray:
    """Column-wise Kronecker product, first matrix slowest."""
    out = mats[0]
    for m in mats[1:]:
        out = (out[:, None, :] * m[None, :, :]).reshape(-1, out.shape[1])
    return out


def khatri_rao_flatten(a: Ctd, skip: int) -> np.ndarray:
    """Khatri-Rao product of all factor matrices except direction ``skip``."""
    if not 0 <= skip < a.dims:
        raise IndexError(f"direction {skip} out of range for d={a.dims}")
    if a.rank < 1:
        raise ValueError("khatri_rao_flatten needs rank >= 1")
    rest = [f for i, f in enumerate(a.factors) if i != skip]
    if not rest:
        return np.ones((1, a.rank))
    return khatri_rao(rest)


class DenseTensor:
    """Full array of a tensor, guarded by an entry-count cap. Test oracle only."""

    __slots__ = ("mode_sizes", "data")

    def __init__(self, mode_sizes: Sequence[int], data, cap: int = ORACLE_CAP):
        mode_sizes = tuple(int(m) for m in mode_sizes)
        size = int(np.prod(mode_sizes))
        if size > cap:
            raise OracleCapError(f"{size} entries exceeds oracle cap {cap}")
        data = np.asarray(data, dtype=float).reshape(-1)
        if data.size != size:
            raise ShapeError(f"data has {data.size} entries, expected {size}")
        self.mode_sizes = mode_sizes
        self.data = data

    @property
    def array(self) -> np.ndarray:
        return self.data.reshape(self.mode_sizes)

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))


def dense_expand(a: Ctd, cap: int = ORACLE_CAP) -> DenseTensor:
    size = int(np.prod(a.mode_sizes))
    if size > cap:
        raise OracleCapError(f"{size} entries exceeds oracle cap {cap}")
    if a.rank == 0:
        return DenseTensor(a.mode_sizes, np.zeros(size), cap)
    flat = khatri_rao(list(a.factors)) @ a.s
    return DenseTensor(a.mode_sizes, flat, cap)


# ---------------------------------------------------------------------------
# Separated operators
# ---------------------------------------------------------------------------


class SeparatedOperator:
    """``sum_l s_l A_1^l (x) ... (x) A_d^l`` with square per-direction blocks.

    ``blocks[k][l]`` is the ``M_k x M_k`` matrix (dense ndarray or scipy sparse)
    of term ``l`` in direction ``k``. Unlike CTD s-values, operator s-values
    may be negative.
    """

    __slots__ = ("blocks", "s")

    def __init__(self, blocks, s_values=None):
        blocks = [list(bk) for bk in blocks]
        if not blocks:
            raise ShapeError("operator needs at least one direction")
        r = len(blocks[0])
        for k, bk in enumerate(blocks):
            if len(bk) != r:
                raise ShapeError(f"direction {k} has {len(bk)} blocks, expected {r}")
            m = bk[0].shape[0] if r else 0
            for b in bk:
                if b.shape != (m, m):
                    raise ShapeError(f"direction {k}: block shape {b.shape}, expected ({m}, {m})")
        s = np.ones(r) if s_values is None else np.asarray(s_values, dtype=float).reshape(-1)
        if s.size != r:
            raise ShapeError("s-values length differs from operator rank")
        self.blocks = blocks
        self.s = s

    @property
    def dims(self) -> int:
        return len(self.blocks)

    @property
    def rank(self) -> int:
        return self.s.size

    @property
    def mode_sizes(self) -> tuple[int, ...]:
        return tuple(bk[0].shape[0] for bk in self.blocks)

    def __repr__(self):
        return f"SeparatedOperator(mode_sizes={self.mode_sizes}, rank={self.rank})"

    @classmethod
    def identity(cls, mode_sizes: Sequence[int]) -> "SeparatedOperator":
        return cls([[sp.identity(m, format="csr")] for m in mode_sizes], [1.0])

    def transpose(self) -> "SeparatedOperator":
        return SeparatedOperator([[b.T for b in bk] for bk in self.blocks], self.s)

    def is_symmetric(self, tol: float = 1e-12) -> bool:
        for bk in self.blocks:
            for b in bk:
                diff = b - b.T
                amax = abs(diff).max() if sp.issparse(diff) else np.abs(diff).max()
                scale_ = abs(b).max() if sp.issparse(b) else np.abs(b).max()
                if amax > tol * max(scale_, 1.0):
                    return False
        return True

    def identity_minus(self, c: float) -> "SeparatedOperator":
        """The operator ``I - c * self``."""
        eye = SeparatedOperator.identity(self.mode_sizes)
        blocks = [eye.blocks[k] + self.blocks[k] for k in range(self.dims)]
        return SeparatedOperator(blocks, np.concatenate([[1.0], -c * self.s]))

    def to_dense(self, cap: int = ORACLE_CAP) -> np.ndarray:
        size = int(np.prod(self.mode_sizes))
        if size > cap:
            raise OracleCapError(f"{size} rows exceeds oracle cap {cap}")
        out = np.zeros((size, size))
        for l in range(self.rank):
            term = np.ones((1, 1))
            for bk in self.blocks:
                b = bk[l].toarray() if sp.issparse(bk[l]) else np.asarray(bk[l])
                term = np.kron(term, b)
            out += self.s[l] * term
        return out


def apply_operator(op: SeparatedOperator, f: Ctd) -> Ctd:
    """Apply ``op`` termwise; the result has nominal rank ``r_A * r_F``."""
    if op.mode_sizes != f.mode_sizes:
        raise ShapeError(f"operator {op.mode_sizes} vs tensor {f.mode_sizes}")
    if f.rank == 0 or op.rank == 0:
        return Ctd.zeros(f.mode_sizes)
    factors = []
    for k in range(f.dims):
        factors.append(np.hstack([np.asarray(b @ f.factors[k]) for b in op.blocks[k]]))
    s = np.kron(op.s, f.s)
    return Ctd(factors, s)
