"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``CTD_RALS_DISABLE_JIT=1`` (read at import time) to force the numpy
implementations. Both variants are always importable under explicit names so
that tests and ``benchmarks/bench_kernels.py`` can compare them directly.
"""
import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_JIT = HAVE_NUMBA and os.environ.get("CTD_RALS_DISABLE_JIT", "0") not in ("1", "true", "yes")


def _njit(*args, **kwargs):
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)

    def wrap(f):
        return f

    return wrap


# ---------------------------------------------------------------------------
# Hadamard product of a stack of matrices, skipping one slice
# ---------------------------------------------------------------------------


def hadamard_except_numpy(stack, skip):
    """Entrywise product of ``stack[i]`` over all ``i != skip``."""
    d = stack.shape[0]
    out = np.ones(stack.shape[1:], dtype=stack.dtype)
    for i in range(d):
        if i != skip:
            out *= stack[i]
    return out


@_njit(cache=True)
def hadamard_except_jit(stack, skip):
    d, m, n = stack.shape
    out = np.ones((m, n), dtype=stack.dtype)
    for i in range(d):
        if i == skip:
            continue
        for a in range(m):
            for b in range(n):
                out[a, b] *= stack[i, a, b]
    return out


# ---------------------------------------------------------------------------
# P1 stiffness assembly on triangles
# ---------------------------------------------------------------------------


def p1_stiffness_triplets_numpy(coords, tris, coef):
    """COO triplets of the P1 stiffness matrix for ``-div(a grad u)``.

    ``coef`` holds one coefficient value per element.
    """
    p = coords[tris]  # (ne, 3, 2)
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    area = 0.5 * np.abs(det)
    # gradients of barycentric coordinates
    grads = np.empty((len(tris), 3, 2))
    grads[:, 1, 0] = e2[:, 1] / det
    grads[:, 1, 1] = -e2[:, 0] / det
    grads[:, 2, 0] = -e1[:, 1] / det
    grads[:, 2, 1] = e1[:, 0] / det
    grads[:, 0] = -grads[:, 1] - grads[:, 2]
    local = np.einsum("eik,ejk->eij", grads, grads) * (coef * area)[:, None, None]
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    return rows, cols, local.ravel()


@_njit(cache=True)
def p1_stiffness_triplets_jit(coords, tris, coef):
    ne = tris.shape[0]
    rows = np.empty(9 * ne, dtype=np.int64)
    cols = np.empty(9 * ne, dtype=np.int64)
    vals = np.empty(9 * ne)
    g = np.empty((3, 2))
    for e in range(ne):
        i0, i1, i2 = tris[e, 0], tris[e, 1], tris[e, 2]
        e1x = coords[i1, 0] - coords[i0, 0]
        e1y = coords[i1, 1] - coords[i0, 1]
        e2x = coords[i2, 0] - coords[i0, 0]
        e2y = coords[i2, 1] - coords[i0, 1]
        det = e1x * e2y - e1y * e2x
        scale = coef[e] * 0.5 * abs(det)
        g[1, 0] = e2y / det
        g[1, 1] = -e2x / det
        g[2, 0] = -e1y / det
        g[2, 1] = e1x / det
        g[0, 0] = -g[1, 0] - g[2, 0]
        g[0, 1] = -g[1, 1] - g[2, 1]
        pos = 9 * e
        for a in range(3):
            for b in range(3):
                rows[pos] = tris[e, a]
                cols[pos] = tris[e, b]
                vals[pos] = scale * (g[a, 0] * g[b, 0] + g[a, 1] * g[b, 1])
                pos += 1
    return rows, cols, vals


# ---------------------------------------------------------------------------
# Double-double Gram products
#
# Residuals ||F - G||^2 are differences of nearly equal quantities once the
# iterate develops large cancelling terms. These kernels evaluate the
# Hadamard product of per-direction Gram matrices with error-free transforms
# (Dekker split, TwoSum), so each entry carries ~106 bits.
# ---------------------------------------------------------------------------

_SPLIT = 134217729.0  # 2**27 + 1


def _two_sum_np(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _two_prod_np(a, b):
    p = a * b
    c = _SPLIT * a
    ah = c - (c - a)
    al = a - ah
    c = _SPLIT * b
    bh = c - (c - b)
    bl = b - bh
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


def dd_gram_product_numpy(x, y, offsets):
    """Hadamard product over directions of ``x_k.T @ y_k`` in double-double.

    ``x`` and ``y`` stack the per-direction factor matrices row-wise;
    direction ``k`` occupies rows ``offsets[k]:offsets[k+1]``. Returns
    ``(hi, lo)``.
    """
    ra, rb = x.shape[1], y.shape[1]
    hi = np.ones((ra, rb))
    lo = np.zeros((ra, rb))
    for k in range(len(offsets) - 1):
        sh = np.zeros((ra, rb))
        sl = np.zeros((ra, rb))
        for j in range(offsets[k], offsets[k + 1]):
            p, e = _two_prod_np(x[j][:, None], y[j][None, :])
            sh, t = _two_sum_np(sh, p)
            sl += t + e
        sh, sl = _two_sum_np(sh, sl)
        p, e = _two_prod_np(hi, sh)
        e += hi * sl + lo * sh
        hi, lo = _two_sum_np(p, e)
    return hi, lo


def dd_quad_form_numpy(u, hi, lo, v):
    """``u.T @ (hi + lo) @ v`` accumulated in double-double; returns ``(hi, lo)``."""
    sh = 0.0
    sl = 0.0
    for a in range(hi.shape[0]):
        for b in range(hi.shape[1]):
            w, we = _two_prod_np(u[a], v[b])
            p, e = _two_prod_np(w, hi[a, b])
            e += w * lo[a, b] + we * hi[a, b]
            sh, t = _two_sum_np(sh, p)
            sl += t + e
    return _two_sum_np(sh, sl)


def dd_gram_numpy(x, y):
    """``x.T @ y`` in double-double; returns ``(hi, lo)``."""
    sh = np.zeros((x.shape[1], y.shape[1]))
    sl = np.zeros_like(sh)
    for j in range(x.shape[0]):
        p, e = _two_prod_np(x[j][:, None], y[j][None, :])
        sh, t = _two_sum_np(sh, p)
        sl += t + e
    return _two_sum_np(sh, sl)


def _dd_mul_np(ah, al, bh, bl):
    p, e = _two_prod_np(ah, bh)
    e += ah * bl + al * bh
    return _two_sum_np(p, e)


def dd_hadamard_except_numpy(hi, lo, skip):
    """Double-double entrywise product of ``(hi, lo)[i]`` over ``i != skip``."""
    oh = np.ones(hi.shape[1:])
    ol = np.zeros(hi.shape[1:])
    for i in range(hi.shape[0]):
        if i != skip:
            oh, ol = _dd_mul_np(oh, ol, hi[i], lo[i])
    return oh, ol


def dd_rhs_numpy(gk, sg, whi, wlo):
    """``gk @ diag(sg) @ (whi + wlo)`` in double-double; returns ``(hi, lo)``."""
    sh = np.zeros((gk.shape[0], whi.shape[1]))
    sl = np.zeros_like(sh)
    for l in range(gk.shape[1]):
        th, tl = _two_prod_np(gk[:, l], sg[l])
        ph, pl = _dd_mul_np(th[:, None], tl[:, None], whi[l][None, :], wlo[l][None, :])
        sh, t = _two_sum_np(sh, ph)
        sl += t + pl
    return _two_sum_np(sh, sl)


def dd_refine_residual_numpy(rhi, rlo, bhi, blo, c):
    """``rhs.T - B @ c`` with products carried in double-double, rounded.

    ``rhs`` is ``M x r`` as ``(rhi, rlo)``, ``B`` is ``r x r``, ``c`` is ``r x M``.
    """
    sh = rhi.T.copy()
    sl = rlo.T.copy()
    for a in range(bhi.shape[1]):
        p, e = _two_prod_np(bhi[:, a][:, None], c[a][None, :])
        e += blo[:, a][:, None] * c[a][None, :]
        sh, t = _two_sum_np(sh, -p)
        sl += t - e
    return sh + sl


def _dd_add_np(ah, al, bh, bl):
    s, e = _two_sum_np(ah, bh)
    return _two_sum_np(s, e + al + bl)


def _dd_div_np(ah, al, bh, bl):
    q = ah / bh
    ph, pl = _dd_mul_np(q, 0.0 * q, bh, bl)
    rh, rl = _dd_add_np(ah, al, -ph, -pl)
    return _two_sum_np(q, rh / bh)


def dd_cholesky_solve_numpy(bhi, blo, rhi, rlo, pivot_tol):
    """Solve ``B C = rhs.T`` by Cholesky in double-double.

    ``B`` is ``r x r`` as ``(bhi, blo)``, ``rhs`` is ``M x r``. Returns
    ``(C, ok)``; ``ok`` is false when a pivot falls below ``pivot_tol`` times
    the largest diagonal entry, i.e. ``B`` is not positive definite at this
    precision.
    """
    r = bhi.shape[0]
    lh = np.zeros((r, r))
    ll = np.zeros((r, r))
    floor = pivot_tol * np.abs(np.diag(bhi)).max()
    for j in range(r):
        sh, sl = bhi[j:, j].copy(), blo[j:, j].copy()
        for k in range(j):
            ph, pl = _dd_mul_np(lh[j:, k], ll[j:, k], lh[j, k], ll[j, k])
            sh, sl = _dd_add_np(sh, sl, -ph, -pl)
        if not sh[0] > floor:
            return np.zeros((r, rhi.shape[0])), False
        dh = np.sqrt(sh[0])
        ph, pl = _two_prod_np(dh, dh)
        dl = ((sh[0] - ph) - pl + sl[0]) / (2.0 * dh)
        dh, dl = _two_sum_np(dh, dl)
        lh[j, j], ll[j, j] = dh, dl
        lh[j + 1 :, j], ll[j + 1 :, j] = _dd_div_np(sh[1:], sl[1:], dh, dl)
    yh, yl = rhi.T.copy(), rlo.T.copy()
    for j in range(r):
        for k in range(j):
            ph, pl = _dd_mul_np(yh[k], yl[k], lh[j, k], ll[j, k])
            yh[j], yl[j] = _dd_add_np(yh[j], yl[j], -ph, -pl)
        yh[j], yl[j] = _dd_div_np(yh[j], yl[j], lh[j, j], ll[j, j])
    for j in range(r - 1, -1, -1):
        for k in range(j + 1, r):
            ph, pl = _dd_mul_np(yh[k], yl[k], lh[k, j], ll[k, j])
            yh[j], yl[j] = _dd_add_np(yh[j], yl[j], -ph, -pl)
        yh[j], yl[j] = _dd_div_np(yh[j], yl[j], lh[j, j], ll[j, j])
    return yh + yl, True


@_njit(cache=True, inline="always")
def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


@_njit(cache=True, inline="always")
def _two_prod(a, b):
    p = a * b
    c = _SPLIT * a
    ah = c - (c - a)
    al = a - ah
    c = _SPLIT * b
    bh = c - (c - b)
    bl = b - bh
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


@_njit(cache=True)
def dd_gram_product_jit(x, y, offsets):
    ra = x.shape[1]
    rb = y.shape[1]
    hi = np.ones((ra, rb))
    lo = np.zeros((ra, rb))
    for k in range(offsets.shape[0] - 1):
        for a in range(ra):
            for b in range(rb):
                sh = 0.0
                sl = 0.0
                for j in range(offsets[k], offsets[k + 1]):
                    p, e = _two_prod(x[j, a], y[j, b])
                    sh, t = _two_sum(sh, p)
                    sl += t + e
                sh, sl = _two_sum(sh, sl)
                p, e = _two_prod(hi[a, b], sh)
                e += hi[a, b] * sl + lo[a, b] * sh
                hi[a, b], lo[a, b] = _two_sum(p, e)
    return hi, lo


@_njit(cache=True)
def dd_quad_form_jit(u, hi, lo, v):
    sh = 0.0
    sl = 0.0
    for a in range(hi.shape[0]):
        for b in range(hi.shape[1]):
            w, we = _two_prod(u[a], v[b])
            p, e = _two_prod(w, hi[a, b])
            e += w * lo[a, b] + we * hi[a, b]
            sh, t = _two_sum(sh, p)
            sl += t + e
    return _two_sum(sh, sl)


@_njit(cache=True)
def dd_gram_jit(x, y):
    ra = x.shape[1]
    rb = y.shape[1]
    hi = np.empty((ra, rb))
    lo = np.empty((ra, rb))
    for a in range(ra):
        for b in range(rb):
            sh = 0.0
            sl = 0.0
            for j in range(x.shape[0]):
                p, e = _two_prod(x[j, a], y[j, b])
                sh, t = _two_sum(sh, p)
                sl += t + e
            hi[a, b], lo[a, b] = _two_sum(sh, sl)
    return hi, lo


@_njit(cache=True)
def dd_hadamard_except_jit(hi, lo, skip):
    d, m, n = hi.shape
    oh = np.ones((m, n))
    ol = np.zeros((m, n))
    for i in range(d):
        if i == skip:
            continue
        for a in range(m):
            for b in range(n):
                p, e = _two_prod(oh[a, b], hi[i, a, b])
                e += oh[a, b] * lo[i, a, b] + ol[a, b] * hi[i, a, b]
                oh[a, b], ol[a, b] = _two_sum(p, e)
    return oh, ol


@_njit(cache=True)
def dd_rhs_jit(gk, sg, whi, wlo):
    m, rg = gk.shape
    r = whi.shape[1]
    hi = np.empty((m, r))
    lo = np.empty((m, r))
    for j in range(m):
        for b in range(r):
            sh = 0.0
            sl = 0.0
            for l in range(rg):
                th, tl = _two_prod(gk[j, l], sg[l])
                p, e = _two_prod(th, whi[l, b])
                e += th * wlo[l, b] + tl * whi[l, b]
                sh, t = _two_sum(sh, p)
                sl += t + e
            hi[j, b], lo[j, b] = _two_sum(sh, sl)
    return hi, lo


@_njit(cache=True)
def dd_refine_residual_jit(rhi, rlo, bhi, blo, c):
    r, m = c.shape
    out = np.empty((r, m))
    for b in range(r):
        for j in range(m):
            sh = rhi[j, b]
            sl = rlo[j, b]
            for a in range(r):
                p, e = _two_prod(bhi[b, a], c[a, j])
                e += blo[b, a] * c[a, j]
                sh, t = _two_sum(sh, -p)
                sl += t - e
            out[b, j] = sh + sl
    return out


@_njit(cache=True, inline="always")
def _dd_mul(ah, al, bh, bl):
    p, e = _two_prod(ah, bh)
    e += ah * bl + al * bh
    return _two_sum(p, e)


@_njit(cache=True, inline="always")
def _dd_add(ah, al, bh, bl):
    s, e = _two_sum(ah, bh)
    return _two_sum(s, e + al + bl)


@_njit(cache=True, inline="always")
def _dd_div(ah, al, bh, bl):
    q = ah / bh
    ph, pl = _dd_mul(q, 0.0, bh, bl)
    rh, rl = _dd_add(ah, al, -ph, -pl)
    return _two_sum(q, rh / bh)


@_njit(cache=True)
def dd_cholesky_solve_jit(bhi, blo, rhi, rlo, pivot_tol):
    r = bhi.shape[0]
    m = rhi.shape[0]
    lh = np.zeros((r, r))
    ll = np.zeros((r, r))
    top = 0.0
    for j in range(r):
        top = max(top, abs(bhi[j, j]))
    floor = pivot_tol * top
    for j in range(r):
        for i in range(j, r):
            sh = bhi[i, j]
            sl = blo[i, j]
            for k in range(j):
                ph, pl = _dd_mul(lh[i, k], ll[i, k], lh[j, k], ll[j, k])
                sh, sl = _dd_add(sh, sl, -ph, -pl)
            if i == j:
                if not sh > floor:
                    return np.zeros((r, m)), False
                dh = np.sqrt(sh)
                ph, pl = _two_prod(dh, dh)
                dl = ((sh - ph) - pl + sl) / (2.0 * dh)
                lh[j, j], ll[j, j] = _two_sum(dh, dl)
            else:
                lh[i, j], ll[i, j] = _dd_div(sh, sl, lh[j, j], ll[j, j])
    out = np.empty((r, m))
    yh = np.empty(r)
    yl = np.empty(r)
    for col in range(m):
        for j in range(r):
            sh = rhi[col, j]
            sl = rlo[col, j]
            for k in range(j):
                ph, pl = _dd_mul(yh[k], yl[k], lh[j, k], ll[j, k])
                sh, sl = _dd_add(sh, sl, -ph, -pl)
            yh[j], yl[j] = _dd_div(sh, sl, lh[j, j], ll[j, j])
        for j in range(r - 1, -1, -1):
            sh = yh[j]
            sl = yl[j]
            for k in range(j + 1, r):
                ph, pl = _dd_mul(yh[k], yl[k], lh[k, j], ll[k, j])
                sh, sl = _dd_add(sh, sl, -ph, -pl)
            yh[j], yl[j] = _dd_div(sh, sl, lh[j, j], ll[j, j])
        for j in range(r):
            out[j, col] = yh[j] + yl[j]
    return out, True


if USE_JIT:
    hadamard_except = hadamard_except_jit
    p1_stiffness_triplets = p1_stiffness_triplets_jit
    dd_gram_product = dd_gram_product_jit
    dd_quad_form = dd_quad_form_jit
    dd_gram = dd_gram_jit
    dd_hadamard_except = dd_hadamard_except_jit
    dd_rhs = dd_rhs_jit
    dd_refine_residual = dd_refine_residual_jit
    dd_cholesky_solve = dd_cholesky_solve_jit
else:
    hadamard_except = hadamard_except_numpy
    p1_stiffness_triplets = p1_stiffness_triplets_numpy
    dd_gram_product = dd_gram_product_numpy
    dd_quad_form = dd_quad_form_numpy
    dd_gram = dd_gram_numpy
    dd_hadamard_except = dd_hadamard_except_numpy
    dd_rhs = dd_rhs_numpy
    dd_refine_residual = dd_refine_residual_numpy
    dd_cholesky_solve = dd_cholesky_solve_numpy
