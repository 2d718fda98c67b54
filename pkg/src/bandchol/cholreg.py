"""Regression-based estimators built on the modified Cholesky factorization.

Each variable is regressed on a window of its predecessors. The
block-thresholding estimator keeps near coefficients, hard-thresholds
intermediate ones at levels that grow over doubling blocks of distance and
drops far ones; the banding baseline keeps a fixed window untouched.
Row indices are 0-based: row ``i`` has predecessors ``0..i-1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .matcore import EDGE_TOL, check_eta, project_spectrum, symmetrize


class SingularGramError(np.linalg.LinAlgError):
    """The Gram matrix of a row regression is not positive definite."""

    def __init__(self, row: int, message: str = ""):
        self.row = row
        super().__init__(message or f"singular Gram matrix in the regression for row {row}")


@dataclass(frozen=True)
class ThresholdConfig:
    """Constants of the block-thresholding estimator.

    Attributes
    ----------
    alpha : float
        Decay rate; sets the keep window ``k0 = ceil(n^{1/(2 alpha + 2)})``.
    eta : float
        Spectral band used for the final projections.
    c : float
        Window divisor; regressions use ``k1 = ceil(n / c)`` predecessors.
    """

    alpha: float
    eta: float
    c: float = 4.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.c > 1:
            raise ValueError("c must exceed 1")
        object.__setattr__(self, "eta", check_eta(self.eta))

    def k0(self, n: int) -> int:
        val = n ** (1.0 / (2 * self.alpha + 2))
        near = round(val)
        if abs(val - near) < 1e-9:
            val = near
        return max(1, math.ceil(val))

    def k1(self, n: int) -> int:
        return math.ceil(n / self.c)

    def windows(self, n: int) -> tuple[int, int]:
        k0, k1 = self.k0(n), self.k1(n)
        if not k0 <= k1 < n:
            raise ValueError(f"need k0 <= k1 < n, got k0={k0}, k1={k1}, n={n}")
        return k0, k1


def _data(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2:
        raise ValueError("data matrix must be n x p")
    return Z


def _fit_row(Z: np.ndarray, i: int, w: int, with_norm: bool):
    # OLS of column i on the w columns before it; returns coefficients on the window
    X = Z[:, i - w:i]
    y = Z[:, i]
    G = X.T @ X
    try:
        c = scipy.linalg.cho_factor(G, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularGramError(i) from exc
    beta = scipy.linalg.cho_solve(c, X.T @ y)
    resid = y - X @ beta
    inv_norm = None
    if with_norm:
        lam_min = scipy.linalg.eigvalsh(G, subset_by_index=(0, 0))[0]
        if lam_min <= 0:
            raise SingularGramError(i)
        inv_norm = 1.0 / lam_min
    return beta, float(resid @ resid), inv_norm


def ols_row(Z, i: int, k1: int) -> tuple[np.ndarray, float]:
    """Least squares coefficients of column ``i`` on up to ``k1`` predecessors.

    Returns
    -------
    coeffs : ndarray, shape (i,)
        Coefficients on columns ``0..i-1``, zero outside the window.
    gram_inverse_norm : float
        Spectral norm of the inverse window Gram matrix (0 when ``i == 0``).
    """
    Z = _data(Z)
    w = min(k1, i)
    coeffs = np.zeros(i)
    if w == 0:
        return coeffs, 0.0
    beta, _, inv_norm = _fit_row(Z, i, w, True)
    coeffs[i - w:] = beta
    return coeffs, inv_norm


def block_index(distance: int, k0: int) -> int:
    """``ceil(log2(distance / k0))`` for ``distance >= k0``, in exact integer arithmetic."""
    if distance <= k0:
        return 0
    ratio = -(-distance // k0)
    return (ratio - 1).bit_length()


def threshold_levels(i: int, k0: int, k1: int, R: float) -> np.ndarray:
    """Threshold for every predecessor of row ``i`` (nan outside the threshold band)."""
    levels = np.full(i, np.nan)
    for j in range(max(0, i - k1 + 1), i - k0 + 1):
        levels[j] = math.sqrt(block_index(i - j, k0) * R)
    return levels


def threshold_row(coeffs, i: int, cfg: ThresholdConfig, R: float, n: int) -> np.ndarray:
    """Apply the keep / threshold / zero casework to one row of coefficients.

    Distances ``i - j < k0`` are kept, ``k0 <= i - j < k1`` are hard
    thresholded at ``sqrt(ceil(log2((i - j) / k0)) * R)`` and the rest are
    set to zero.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (i,):
        raise ValueError(f"expected {i} coefficients")
    k0, k1 = cfg.windows(n)
    out = np.zeros(i)
    keep_from = max(0, i - k0 + 1)
    out[keep_from:] = coeffs[keep_from:]
    levels = threshold_levels(i, k0, k1, R)
    band = ~np.isnan(levels)
    out[band] = np.where(np.abs(coeffs[band]) > levels[band], coeffs[band], 0.0)
    return out


def residual_var(Z, i: int, k1: int) -> float:
    """Residual variance of the window regression for row ``i``.

    The residual sum of squares is divided by ``n - w`` with ``w`` the
    window length; row 0 uses the plain second moment over ``n``.
    """
    Z = _data(Z)
    n = Z.shape[0]
    w = min(k1, i)
    if n <= w:
        raise ValueError(f"n={n} must exceed the window length {w}")
    if w == 0:
        return float(Z[:, i] @ Z[:, i] / n)
    _, rss, _ = _fit_row(Z, i, w, False)
    return rss / (n - w)


@dataclass(frozen=True)
class FrobeniusFit:
    """Intermediate pieces of the block-thresholding estimator."""

    raw_coeffs: np.ndarray
    coeffs: np.ndarray
    resid_var: np.ndarray
    scale: np.ndarray
    estimate: np.ndarray


def frob_fit(Z, cfg: ThresholdConfig) -> FrobeniusFit:
    """Fit the block-thresholding estimator and keep its intermediate pieces."""
    Z = _data(Z)
    n, p = Z.shape
    k0, k1 = cfg.windows(n)
    raw = np.zeros((p, p))
    thr = np.zeros((p, p))
    d = np.empty(p)
    scale = np.zeros(p)
    d[0] = Z[:, 0] @ Z[:, 0] / n
    for i in range(1, p):
        w = min(k1, i)
        beta, rss, inv_norm = _fit_row(Z, i, w, True)
        raw[i, i - w:i] = beta
        R = 8.0 * cfg.eta * inv_norm
        scale[i] = R
        thr[i, :i] = threshold_row(raw[i, :i], i, cfg, R, n)
        d[i] = rss / (n - w)
    factor = project_spectrum(np.eye(p) - thr, cfg.eta, symmetric=False)
    d_clip = _clip_scalar(d, cfg.eta)
    est = symmetrize(factor.T @ (factor / d_clip[:, None]))
    return FrobeniusFit(raw, thr, d, scale, est)


def _clip_scalar(values: np.ndarray, eta: float) -> np.ndarray:
    out = values.copy()
    out[values < 1.0 / eta - EDGE_TOL] = 1.0 / eta
    out[values > eta + EDGE_TOL] = eta
    return out


def frob_estimate(Z, cfg: ThresholdConfig) -> np.ndarray:
    """Block-thresholding precision estimate (targets Frobenius loss)."""
    return frob_fit(Z, cfg).estimate


def banding_estimate(Z, k: int) -> np.ndarray:
    """Banded regression estimate: each row regressed on its ``k`` predecessors.

    No spectral projection is applied.
    """
    Z = _data(Z)
    n, p = Z.shape
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    A = np.zeros((p, p))
    d = np.empty(p)
    d[0] = Z[:, 0] @ Z[:, 0] / n
    for i in range(1, p):
        w = min(k, i)
        beta, rss, _ = _fit_row(Z, i, w, False)
        A[i, i - w:i] = beta
        d[i] = rss / (n - w)
    if np.any(d <= 0):
        raise SingularGramError(int(np.argmin(d)), "zero residual variance")
    factor = np.eye(p) - A
    return symmetrize(factor.T @ (factor / d[:, None]))


def banding_bandwidth(alpha: float, n: int, p: int) -> int:
    """``floor((n / log p)^{1/(2 alpha + 2)})``, at least 1 and below ``p``."""
    val = (n / math.log(p)) ** (1.0 / (2 * alpha + 2))
    return int(min(max(1, math.floor(val + 1e-12)), p - 1))
