"""Small dense linear-algebra helpers used throughout the package.

Conventions fixed here once:

* SPD matrices are factored as lower-triangular Cholesky factors.
* Unconstrained storage of an SPD matrix is the lower triangle of its
  Cholesky factor, row-major via ``np.tril_indices``, with the diagonal
  kept in log space.  Any real vector therefore maps to a valid SPD matrix.
* On factorization failure a jitter of ``1e-8 * trace / d`` is added to the
  diagonal, retrying up to three times before raising.
"""

from functools import lru_cache

import numpy as np

from .errors import NumericalError

JITTER_SCALE = 1e-8
MAX_JITTER_TRIES = 3


@lru_cache(maxsize=None)
def _tril_cache(d):
    rows, cols = np.tril_indices(d)
    return rows, cols, np.flatnonzero(rows == cols), np.arange(d)


def symmetrize(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def cholesky_spd(mat, what="matrix"):
    """Lower Cholesky factor with trace-scaled jitter retries."""
    mat = symmetrize(np.asarray(mat, dtype=float))
    d = mat.shape[-1]
    jitter = JITTER_SCALE * np.trace(mat, axis1=-2, axis2=-1) / d
    eye = np.eye(d)
    for attempt in range(MAX_JITTER_TRIES + 1):
        try:
            return np.linalg.cholesky(mat)
        except np.linalg.LinAlgError:
            bump = jitter * (10.0**attempt)
            if np.ndim(bump) > 0:
                bump = bump[..., None, None]
            mat = mat + bump * eye
    raise NumericalError(f"cholesky failed for {what} after jitter retries")


def solve_lower(chol, b):
    """Solve L y = b by substitution, batched; b has matrix-stack shape."""
    d = chol.shape[-1]
    xs = []
    for i in range(d):
        acc = b[..., i, :]
        for j in range(i):
            acc = acc - chol[..., i, j, None] * xs[j]
        xs.append(acc / chol[..., i, i, None])
    return np.stack(xs, axis=-2)


def solve_upper_t(chol, b):
    """Solve L^T x = b by substitution given the lower factor."""
    d = chol.shape[-1]
    xs = [None] * d
    for i in reversed(range(d)):
        acc = b[..., i, :]
        for j in range(i + 1, d):
            acc = acc - chol[..., j, i, None] * xs[j]
        xs[i] = acc / chol[..., i, i, None]
    return np.stack(xs, axis=-2)


def chol_solve(chol, b):
    """Solve (L L^T) x = b given the lower factor."""
    b = np.asarray(b, dtype=float)
    vector = b.ndim == chol.ndim - 1
    if vector:
        b = b[..., None]
    x = solve_upper_t(chol, solve_lower(chol, b))
    return x[..., 0] if vector else x


def inv_from_chol(chol):
    d = chol.shape[-1]
    return chol_solve(chol, np.broadcast_to(np.eye(d), chol.shape))


def logdet_from_chol(chol):
    return 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)


def solve_spd(mat, b, what="matrix"):
    return chol_solve(cholesky_spd(mat, what), b)


def inv_spd(mat, what="matrix"):
    return inv_from_chol(cholesky_spd(mat, what))


def tril_size(d):
    return d * (d + 1) // 2


def tril_from_raw(raw, d):
    """Unconstrained vector -> lower Cholesky factor (log-diagonal storage)."""
    raw = np.asarray(raw, dtype=float)
    rows, cols, diag_slots, idx = _tril_cache(d)
    chol = np.zeros(raw.shape[:-1] + (d, d))
    chol[..., rows, cols] = raw
    chol[..., idx, idx] = np.exp(raw[..., diag_slots])
    return chol


def raw_from_tril(chol):
    """Inverse of tril_from_raw; requires a positive diagonal."""
    chol = np.asarray(chol, dtype=float)
    d = chol.shape[-1]
    rows, cols, diag_slots, _ = _tril_cache(d)
    raw = chol[..., rows, cols].copy()
    raw[..., diag_slots] = np.log(np.diagonal(chol, axis1=-2, axis2=-1))
    return raw


def raw_from_spd(mat):
    return raw_from_tril(np.linalg.cholesky(symmetrize(np.asarray(mat, dtype=float))))


def spd_from_raw(raw, d):
    chol = tril_from_raw(raw, d)
    return chol @ np.swapaxes(chol, -1, -2)


def tril_raw_vjp(raw, d, grad_mat):
    """Pull a full-matrix adjoint of M = L L^T back to the raw vector.

    ``grad_mat`` is the derivative of a scalar with respect to every entry of
    M treated independently (so symmetric in value for symmetric functions).
    """
    chol = tril_from_raw(raw, d)
    grad_chol = (grad_mat + np.swapaxes(grad_mat, -1, -2)) @ chol
    rows, cols, diag_slots, idx = _tril_cache(d)
    out = grad_chol[..., rows, cols].copy()
    out[..., diag_slots] = (
        grad_chol[..., idx, idx] * np.diagonal(chol, axis1=-2, axis2=-1)
    )
    return out


def cholesky_vjp(chol, grad_chol):
    """Adjoint of A -> cholesky(A), symmetric full-matrix form.

    Given dF/dL on the lower factor, returns dF/dA with A treated as a
    symmetric matrix produced upstream.
    """
    d = chol.shape[-1]
    # only lower entries of the factor exist; discard any upper-part adjoint
    p = np.swapaxes(chol, -1, -2) @ np.tril(grad_chol)
    # keep the lower triangle, halve the diagonal
    p = np.tril(p)
    idx = np.arange(d)
    p[..., idx, idx] *= 0.5
    lt_inv = solve_lower(chol, np.broadcast_to(np.eye(d), chol.shape))
    w = np.swapaxes(lt_inv, -1, -2) @ p @ lt_inv
    return symmetrize(w)


def logsumexp(x, axis=None, keepdims=False):
    """Max-shifted log-sum-exp; a lean stand-in for the scipy version.

    The scipy implementation dominates profiles when called per minibatch on
    small arrays, so the hot paths use this one.  All -inf rows return -inf.
    """
    x = np.asarray(x, dtype=float)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    if keepdims:
        return out
    return np.squeeze(out, axis=axis) if axis is not None else float(out)
