"""Dense matrix primitives shared by every estimator.

Indices are 0-based throughout: a block that starts at ``start`` and has
size ``k`` covers rows and columns ``start, ..., start + k - 1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

# eigenvalues (or singular values) this close to a band edge count as inside
EDGE_TOL = 1e-12


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a matrix that must be SPD is not."""


def check_eta(eta: float) -> float:
    """Validate a spectral band parameter and return it as a float."""
    eta = float(eta)
    if not np.isfinite(eta) or eta <= 1.0:
        raise ValueError(f"eta must be a finite real > 1, got {eta!r}")
    return eta


def _square(S) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {S.shape}")
    return S


def is_symmetric(S) -> bool:
    """Exact symmetry check."""
    S = np.asarray(S)
    return S.ndim == 2 and S.shape[0] == S.shape[1] and bool(np.array_equal(S, S.T))


def symmetrize(S) -> np.ndarray:
    """Return ``(S + S.T) / 2``, which is exactly symmetric."""
    S = _square(S)
    return 0.5 * (S + S.T)


def window(start: int, size: int, p: int) -> tuple[int, int]:
    """Intersect ``[start, start + size)`` with ``[0, p)``.

    Returns the half-open bounds ``(lo, hi)``; ``lo == hi`` for an empty window.
    """
    lo = max(int(start), 0)
    hi = min(int(start) + int(size), p)
    return lo, max(lo, hi)


def crop(E, start: int, k: int, *, clip: bool = False):
    """Principal ``k x k`` block of ``E`` starting at ``start``.

    Parameters
    ----------
    E : array_like, shape (p, p)
    start : int
        0-based index of the first row/column of the block.
    k : int
        Block size.
    clip : bool
        In strict mode the block must fit inside ``E``. In clipped mode the
        block is intersected with ``[0, p)`` and ``(block, index)`` is
        returned, ``index`` holding the absolute indices kept.

    Returns
    -------
    ndarray or (ndarray, ndarray)
    """
    E = _square(E)
    p = E.shape[0]
    if k < 1:
        raise ValueError("k must be positive")
    if not clip:
        if start < 0 or start + k > p:
            raise ValueError(f"block [{start}, {start + k}) does not fit in dimension {p}")
        return E[start:start + k, start:start + k].copy()
    lo, hi = window(start, k, p)
    return E[lo:hi, lo:hi].copy(), np.arange(lo, hi)


def expand(C, p: int, start: int, *, clip: bool = False) -> np.ndarray:
    """Place ``C`` on the diagonal of a ``p x p`` zero matrix at ``start``.

    In clipped mode entries that would land outside ``[0, p)`` are dropped.
    """
    C = _square(C)
    k = C.shape[0]
    out = np.zeros((p, p))
    if not clip:
        if start < 0 or start + k > p:
            raise ValueError(f"block [{start}, {start + k}) does not fit in dimension {p}")
        out[start:start + k, start:start + k] = C
        return out
    lo, hi = window(start, k, p)
    if hi > lo:
        out[lo:hi, lo:hi] = C[lo - start:hi - start, lo - start:hi - start]
    return out


def band(S, k: int) -> np.ndarray:
    """Keep entries with ``|i - j| <= k`` and zero the rest."""
    S = _square(S)
    if k < 0:
        raise ValueError("k must be nonnegative")
    idx = np.arange(S.shape[0])
    mask = np.abs(idx[:, None] - idx[None, :]) <= k
    return np.where(mask, S, 0.0)


def spectrum_inside(S, eta: float) -> bool:
    """Cheap test that a symmetric matrix has spectrum in ``[1/eta, eta]``.

    Uses two Cholesky attempts instead of an eigendecomposition. Returns
    False on any failure, so callers fall back to the exact route.
    """
    S = np.asarray(S, dtype=float)
    p = S.shape[0]
    lower = 1.0 / eta - EDGE_TOL
    upper = eta + EDGE_TOL
    eye = np.eye(p)
    try:
        scipy.linalg.cholesky(S - lower * eye, lower=True, check_finite=False)
        # row-sum bound spares the second factorization when it is conclusive
        if np.abs(S).sum(axis=1).max() >= upper:
            scipy.linalg.cholesky(upper * eye - S, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return False
    return True


def _clip_values(values: np.ndarray, eta: float) -> np.ndarray:
    lo, hi = 1.0 / eta, eta
    out = values.copy()
    out[values < lo - EDGE_TOL] = lo
    out[values > hi + EDGE_TOL] = hi
    return out


def project_spectrum(S, eta: float, symmetric: bool | None = None) -> np.ndarray:
    """Clip the spectrum of ``S`` into ``[1/eta, eta]``.

    Symmetric input is clipped through its eigenvalues and stays symmetric;
    general input is clipped through its singular values. Values within
    ``EDGE_TOL`` of an edge are left untouched.

    Parameters
    ----------
    S : array_like, shape (p, p)
    eta : float
        Band parameter, must exceed 1.
    symmetric : bool, optional
        Force the symmetric or general route. By default the route follows an
        exact symmetry check of ``S``.
    """
    eta = check_eta(eta)
    S = _square(S)
    if not np.all(np.isfinite(S)):
        raise np.linalg.LinAlgError("non-finite entries in matrix to project")
    if symmetric is None:
        symmetric = is_symmetric(S)
    if symmetric:
        S = symmetrize(S)
        if spectrum_inside(S, eta):
            return S
        w, U = np.linalg.eigh(S)
        out = (U * _clip_values(w, eta)) @ U.T
        return symmetrize(out)
    U, s, Vt = np.linalg.svd(S)
    return (U * _clip_values(s, eta)) @ Vt


def op_norm(S) -> float:
    """Largest singular value."""
    S = np.asarray(S, dtype=float)
    if S.size == 0:
        return 0.0
    if is_symmetric(S):
        return float(np.max(np.abs(np.linalg.eigvalsh(S))))
    return float(np.linalg.norm(S, 2))


def frob_norm(S) -> float:
    return float(np.linalg.norm(np.asarray(S, dtype=float), "fro"))


def l1_matrix_norm(S) -> float:
    """Maximum absolute column sum."""
    S = np.asarray(S, dtype=float)
    if S.size == 0:
        return 0.0
    return float(np.abs(S).sum(axis=0).max())


@dataclass(frozen=True)
class CholeskyModel:
    """Strictly lower triangular coefficients ``A`` and residual variances ``d``.

    The precision matrix is ``(I - A)^T diag(d)^{-1} (I - A)``.
    """

    A: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        d = np.array(self.d, dtype=float).reshape(-1)
        if A.ndim != 2 or A.shape != (d.size, d.size):
            raise ValueError("A must be p x p and d of length p")
        if np.any(np.triu(A) != 0):
            raise ValueError("A must be strictly lower triangular")
        if not np.all(d > 0):
            raise ValueError("residual variances must be positive")
        A.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "d", d)

    @property
    def p(self) -> int:
        return self.d.size

    def precision(self) -> np.ndarray:
        return recompose(self)

    def covariance(self) -> np.ndarray:
        """``(I - A)^{-1} diag(d) (I - A)^{-T}`` via a triangular solve."""
        L = np.eye(self.p) - self.A
        T = scipy.linalg.solve_triangular(L, np.diag(np.sqrt(self.d)), lower=True)
        return symmetrize(T @ T.T)


def recompose(model: CholeskyModel) -> np.ndarray:
    """Precision matrix ``(I - A)^T diag(d)^{-1} (I - A)``."""
    L = np.eye(model.p) - model.A
    W = L / np.sqrt(model.d)[:, None]
    return symmetrize(W.T @ W)


def modified_cholesky(omega) -> CholeskyModel:
    """Factor an SPD precision matrix as ``(I - A)^T D^{-1} (I - A)``.

    The factor ``D^{-1/2} (I - A)`` is lower triangular, so this is a
    Cholesky factorization taken in reversed variable order.
    """
    omega = _square(omega)
    if not is_symmetric(omega):
        raise ValueError("precision matrix must be symmetric")
    rev = omega[::-1, ::-1]
    try:
        L = scipy.linalg.cholesky(rev, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("matrix is not positive definite") from exc
    # omega = U^T U with U lower triangular
    U = L[::-1, ::-1].T
    diag = np.diag(U)
    A = np.eye(omega.shape[0]) - U / diag[:, None]
    A = np.tril(A, -1)
    return CholeskyModel(A=A, d=1.0 / diag**2)


def population_regression(sigma, i: int, k: int) -> tuple[np.ndarray, float]:
    """Regress variable ``i`` on its ``k`` immediate predecessors.

    Solves the normal equations of the conditioning block directly, which
    makes this an independent check of :func:`modified_cholesky`.

    Parameters
    ----------
    sigma : array_like, shape (p, p)
        Covariance matrix.
    i : int
        0-based index of the response.
    k : int
        Window size, ``0 <= k <= i``.

    Returns
    -------
    coefficients : ndarray, shape (i,)
        Coefficients on variables ``0..i-1``, zero outside the window.
    residual_variance : float
    """
    sigma = _square(sigma)
    if not 0 <= k <= i < sigma.shape[0]:
        raise ValueError(f"need 0 <= k <= i < p, got k={k}, i={i}")
    coef = np.zeros(i)
    if k == 0:
        return coef, float(sigma[i, i])
    W = slice(i - k, i)
    block = sigma[W, W]
    rhs = sigma[W, i]
    try:
        beta = np.linalg.solve(block, rhs)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular conditioning block") from exc
    coef[i - k:] = beta
    return coef, float(sigma[i, i] - rhs @ beta)


def taper_weights(p: int, k: int) -> np.ndarray:
    """Weights ``max(0, 2 - |i-j|/k) - max(0, 1 - |i-j|/k)`` as a matrix."""
    if k < 1:
        raise ValueError("k must be positive")
    idx = np.arange(p)
    dist = np.abs(idx[:, None] - idx[None, :]) / k
    return np.maximum(0.0, 2.0 - dist) - np.maximum(0.0, 1.0 - dist)


def taper_target(omega, k: int) -> np.ndarray:
    """Entrywise taper of ``omega`` with bandwidth ``k``."""
    omega = _square(omega)
    return taper_weights(omega.shape[0], k) * omega


def taper_decomposition(omega, k: int) -> np.ndarray:
    """Evaluate the taper as block sums of expanded crops.

    Sums clipped crops of size ``2k`` over every start in ``[1 - 2k, p)``,
    subtracts the same sum for size ``k`` over ``[1 - k, p)`` and divides by
    ``k``. Used only as a test oracle for :func:`taper_target`.
    """
    omega = _square(omega)
    p = omega.shape[0]
    if k < 1:
        raise ValueError("k must be positive")
    big = np.zeros((p, p))
    for start in range(1 - 2 * k, p):
        block, _ = crop(omega, start, 2 * k, clip=True)
        big += expand(_pad_block(block, start, 2 * k, p), p, start, clip=True)
    small = np.zeros((p, p))
    for start in range(1 - k, p):
        block, _ = crop(omega, start, k, clip=True)
        small += expand(_pad_block(block, start, k, p), p, start, clip=True)
    return (big - small) / k


def _pad_block(block: np.ndarray, start: int, size: int, p: int) -> np.ndarray:
    # re-embed a clipped crop into its nominal size-by-size frame
    full = np.zeros((size, size))
    lo, hi = window(start, size, p)
    full[lo - start:hi - start, lo - start:hi - start] = block
    return full
