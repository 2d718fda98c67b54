"""Rank-based correlation matrices and the cropping estimator built on them.

Both estimators depend on the data only through per-column ranks, so they
are unchanged by strictly increasing transforms of the columns. The
transformed rank statistics are consistent for the correlation matrix of
a latent Gaussian vector.
"""
from __future__ import annotations

import numba
import numpy as np
import scipy.stats

from .cropping import CropConfig, crop_from_gram
from .matcore import symmetrize

KENDALL = "kendall"
SPEARMAN = "spearman"


@numba.njit(cache=True)
def _merge_count(a):
    """Sort ``a`` in place (bottom-up merge sort) and count strict inversions."""
    n = a.shape[0]
    buf = np.empty_like(a)
    swaps = 0
    width = 1
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if a[j] < a[i]:
                    buf[k] = a[j]
                    swaps += mid - i
                    j += 1
                else:
                    buf[k] = a[i]
                    i += 1
                k += 1
            while i < mid:
                buf[k] = a[i]
                i += 1
                k += 1
            while j < hi:
                buf[k] = a[j]
                j += 1
                k += 1
        a, buf = buf, a
        width *= 2
    return swaps


@numba.njit(cache=True)
def _tied_pairs(sorted_vals):
    total = 0
    run = 1
    for t in range(1, sorted_vals.shape[0]):
        if sorted_vals[t] == sorted_vals[t - 1]:
            run += 1
        else:
            total += run * (run - 1) // 2
            run = 1
    return total + run * (run - 1) // 2


@numba.njit(cache=True)
def _kendall_numerator(x_sorted, y_by_x, y_ties):
    """Concordant minus discordant pairs.

    ``y_by_x`` is the second column reordered by ``x`` ascending, with ties in
    ``x`` broken by ``y`` ascending; ``y_ties`` counts tied pairs in ``y``.
    """
    n = x_sorted.shape[0]
    pairs = n * (n - 1) // 2
    x_ties = 0
    joint = 0
    run = 1
    jrun = 1
    for t in range(1, n):
        if x_sorted[t] == x_sorted[t - 1]:
            run += 1
            if y_by_x[t] == y_by_x[t - 1]:
                jrun += 1
            else:
                joint += jrun * (jrun - 1) // 2
                jrun = 1
        else:
            x_ties += run * (run - 1) // 2
            joint += jrun * (jrun - 1) // 2
            run = 1
            jrun = 1
    x_ties += run * (run - 1) // 2
    joint += jrun * (jrun - 1) // 2
    swaps = _merge_count(y_by_x.copy())
    return pairs - x_ties - y_ties + joint - 2 * swaps


@numba.njit(cache=True)
def _kendall_all(Z, order, y_ties):
    n, p = Z.shape
    out = np.zeros((p, p))
    for i in range(p):
        xs = Z[order[:, i], i]
        for j in range(i + 1, p):
            ys = Z[order[:, i], j]
            # break ties in x by y so tied-x pairs never count as inversions
            t0 = 0
            for t in range(1, n + 1):
                if t == n or xs[t] != xs[t0]:
                    if t - t0 > 1:
                        ys[t0:t] = np.sort(ys[t0:t])
                    t0 = t
            out[i, j] = _kendall_numerator(xs, ys, y_ties[j])
    return out


def kendall_tau_matrix(Z, method: str = "mergesort") -> np.ndarray:
    """Pairwise Kendall tau (tau-a, ``sgn(0) = 0``) with unit diagonal.

    Parameters
    ----------
    Z : ndarray, shape (n, p)
    method : {"mergesort", "brute"}
        ``"mergesort"`` counts inversions in ``O(n log n)`` per pair;
        ``"brute"`` enumerates all pairs of rows and serves as a reference.
    """
    Z = np.asarray(Z, dtype=float)
    n, p = Z.shape
    if n < 2:
        raise ValueError("need at least two observations")
    pairs = n * (n - 1) / 2
    if method == "brute":
        tau = np.eye(p)
        signs = [np.sign(Z[:, None, i] - Z[None, :, i]) for i in range(p)]
        for i in range(p):
            for j in range(i + 1, p):
                # each unordered pair appears twice in the full sign product
                tau[i, j] = tau[j, i] = (signs[i] * signs[j]).sum() / 2 / pairs
        return tau
    if method != "mergesort":
        raise ValueError(f"unknown method {method!r}")
    Zc = np.ascontiguousarray(Z)
    order = np.ascontiguousarray(np.argsort(Zc, axis=0, kind="stable"))
    y_ties = np.array([_tied_pairs(np.sort(Zc[:, j])) for j in range(p)], dtype=np.int64)
    num = _kendall_all(Zc, order, y_ties)
    tau = num / pairs
    tau = tau + tau.T
    np.fill_diagonal(tau, 1.0)
    return tau


def kendall_matrix(Z, method: str = "mergesort") -> np.ndarray:
    """Correlation estimate ``sin(pi / 2 * tau)`` from Kendall's tau."""
    S = np.sin(0.5 * np.pi * kendall_tau_matrix(Z, method))
    np.fill_diagonal(S, 1.0)
    return symmetrize(S)


def spearman_rho_matrix(Z) -> np.ndarray:
    """Pearson correlation of average ranks."""
    Z = np.asarray(Z, dtype=float)
    n, p = Z.shape
    if n < 2:
        raise ValueError("need at least two observations")
    R = scipy.stats.rankdata(Z, axis=0) - (n + 1) / 2.0
    ss = np.einsum("ij,ij->j", R, R)
    if np.any(ss == 0):
        bad = int(np.flatnonzero(ss == 0)[0])
        raise ValueError(f"column {bad} has constant ranks")
    rho = (R.T @ R) / np.sqrt(np.outer(ss, ss))
    rho = np.clip(symmetrize(rho), -1.0, 1.0)
    np.fill_diagonal(rho, 1.0)
    return rho


def spearman_matrix(Z) -> np.ndarray:
    """Correlation estimate ``2 sin(pi / 6 * rho)`` from Spearman's rho."""
    S = 2.0 * np.sin(np.pi / 6.0 * spearman_rho_matrix(Z))
    np.fill_diagonal(S, 1.0)
    return symmetrize(S)


def rank_matrix(Z, method: str) -> np.ndarray:
    if method == KENDALL:
        return kendall_matrix(Z)
    if method == SPEARMAN:
        return spearman_matrix(Z)
    raise ValueError(f"unknown rank method {method!r}")


def rank_crop_estimate(Z, cfg: CropConfig, method: str = KENDALL) -> np.ndarray:
    """Cropping estimate with a rank-based correlation matrix in place of ``Z^T Z / n``."""
    return crop_from_gram(rank_matrix(Z, method), cfg.k, cfg.eta)


def rescale_to_diagonal(est, target_diag) -> np.ndarray:
    """Congruence ``S est S`` with ``S`` chosen so the diagonal becomes ``target_diag``.

    Only meaningful when a reference diagonal is known, as in simulations.
    """
    est = np.asarray(est, dtype=float)
    target = np.asarray(target_diag, dtype=float)
    diag = np.diag(est)
    if np.any(diag <= 0) or np.any(target <= 0):
        raise ValueError("diagonals must be positive")
    s = np.sqrt(target / diag)
    out = symmetrize(est * np.outer(s, s))
    np.fill_diagonal(out, target)
    return out
