"""Local cropping estimator of a precision matrix under operator norm.

Every start position contributes the center block of the inverse of a
spectrally clipped local covariance window. Blocks of size ``2k`` and ``k``
are summed, differenced and divided by ``k``, which reproduces a tapered
version of the precision matrix; a final spectral clip keeps the estimate
well conditioned.

Starts are 0-based. For block size ``k`` and start ``s`` the target set is
``[s, s + k)`` and the covariance window ``[s - k, s + 2k)``, both
intersected with ``[0, p)``. Starts run over ``1 - k, ..., p - 1`` so that
every entry is covered by the same number of blocks as in the interior.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.linalg.lapack import dpotrf as _potrf
from scipy.linalg.lapack import dpotri as _potri

from .matcore import (
    EDGE_TOL,
    _clip_values,
    check_eta,
    project_spectrum,
    symmetrize,
    window,
)

DEFAULT_CACHE_BYTES = 768 * 2**20
_BATCH_BYTES = 64 * 2**20


@dataclass(frozen=True)
class CropConfig:
    """Bandwidth ``k`` and spectral band ``eta`` of the cropping estimator."""

    k: int
    eta: float

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k!r}")
        object.__setattr__(self, "k", int(self.k))
        object.__setattr__(self, "eta", check_eta(self.eta))


def sample_gram(Z) -> np.ndarray:
    """Uncentered second-moment matrix ``Z^T Z / n``."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise ValueError("data matrix must be n x p with n >= 2")
    return symmetrize(Z.T @ Z / Z.shape[0])


def cov_window(start: int, k: int, p: int) -> tuple[int, int]:
    """Half-open covariance window ``[start - k, start + 2k)`` clipped to ``[0, p)``."""
    return window(start - k, 3 * k, p)


def target_window(start: int, k: int, p: int) -> tuple[int, int]:
    return window(start, k, p)


def local_cov(gram, start: int, k: int, eta: float):
    """Clipped local covariance block around ``start``.

    Parameters
    ----------
    gram : ndarray, shape (p, p)
        Sample second-moment matrix (or any substitute such as a rank-based
        correlation matrix).
    start : int
        First index of the target block.
    k : int
        Block size.
    eta : float

    Returns
    -------
    block : ndarray
        Spectrally clipped covariance of the window.
    index : ndarray
        Absolute indices of the window.
    """
    gram = np.asarray(gram, dtype=float)
    lo, hi = cov_window(start, k, gram.shape[0])
    if hi <= lo:
        raise ValueError(f"empty covariance window for start={start}, k={k}")
    block = project_spectrum(gram[lo:hi, lo:hi], eta, symmetric=True)
    return block, np.arange(lo, hi)


def local_prec(gram, start: int, k: int, eta: float):
    """Target block of the inverse of :func:`local_cov`.

    Returns
    -------
    block : ndarray
        Precision block for the target indices.
    index : ndarray
        Absolute target indices ``[start, start + k)`` clipped to ``[0, p)``.
    """
    cov, widx = local_cov(gram, start, k, eta)
    lo = widx[0]
    t_lo, t_hi = target_window(start, k, len(gram))
    if t_hi <= t_lo:
        raise ValueError(f"empty target block for start={start}, k={k}")
    inv = scipy.linalg.cho_solve(scipy.linalg.cho_factor(cov, lower=True), np.eye(len(widx)))
    sel = slice(t_lo - lo, t_hi - lo)
    return symmetrize(inv[sel, sel]), np.arange(t_lo, t_hi)


def _clipped_inverse(B: np.ndarray, eta: float, sel: slice | None = None) -> np.ndarray:
    """Inverse of the spectrally clipped ``B``, or only its ``sel`` block.

    Equivalent to inverting ``project_spectrum(B, eta)``.
    """
    m = B.shape[0]
    if sel is None:
        sel = slice(0, m)
    order = np.r_[0:sel.start, sel.stop:m, sel.start:sel.stop]
    Bp = B[np.ix_(order, order)]
    return _clipped_inverse_tail(Bp[None], eta, sel.stop - sel.start)[0]


def _clipped_inverse_tail(
    B: np.ndarray, eta: float, t: int, *, low_ok: bool = False, top_ok: bool = False
) -> np.ndarray:
    """Trailing ``t x t`` block of the clipped inverse for a stack ``B`` (N, m, m).

    Clipping from below goes through a full eigendecomposition. When only the
    top of the spectrum leaves the band, the Cholesky inverse is corrected by
    the offending eigenpairs, found with a subset eigensolver. ``low_ok`` and
    ``top_ok`` assert that the respective edge is already known to hold, for
    instance by eigenvalue interlacing with a larger matrix.
    """
    N, m, _ = B.shape
    eye = np.eye(m)
    lower = 1.0 / eta - EDGE_TOL
    upper = eta + EDGE_TOL
    out = np.empty((N, t, t))
    tail = slice(m - t, m)

    inside = np.ones(N, dtype=bool)
    if not low_ok:
        try:
            np.linalg.cholesky(B - lower * eye)
        except np.linalg.LinAlgError:
            for i in range(N):
                inside[i] = _potrf(B[i] - lower * eye, lower=1, clean=0)[1] == 0
    for i in np.flatnonzero(~inside):
        w, U = np.linalg.eigh(B[i])
        Ut = U[tail]
        out[i] = (Ut / _clip_values(w, eta)) @ Ut.T
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        return out
    Bg = B if idx.size == N else B[idx]

    if t == m:
        inv = np.empty((idx.size, m, m))
        for g in range(idx.size):
            c, info = _potrf(Bg[g], lower=1, clean=1)
            if info != 0:
                raise np.linalg.LinAlgError("local covariance window is not positive definite")
            ci, info = _potri(c, lower=1)
            inv[g] = np.tril(ci) + np.tril(ci, -1).T
    else:
        L = np.linalg.cholesky(Bg)
        Linv = np.linalg.inv(L[:, tail, tail])
        inv = np.swapaxes(Linv, 1, 2) @ Linv

    if not top_ok:
        need = np.abs(Bg).sum(axis=2).max(axis=1) >= upper
        for g in np.flatnonzero(need):
            if _potrf(upper * eye - Bg[g], lower=1, clean=0)[1] == 0:
                continue
            w, V = scipy.linalg.eigh(
                Bg[g], subset_by_value=(upper, np.inf), driver="evr", check_finite=False
            )
            if w.size:
                Vt = V[tail]
                inv[g] += (Vt * (1.0 / eta - 1.0 / w)) @ Vt.T
    out[idx] = inv
    return out


class _BlockSums:
    """Sums of expanded local precision blocks for one Gram matrix.

    Windows touching either end of the index range are shared between block
    sizes and are kept in a byte-capped LRU cache of full inverses. By
    eigenvalue interlacing every window inherits the spectral bounds of the
    whole matrix, which lets most windows skip the band checks.
    """

    def __init__(self, gram: np.ndarray, eta: float, cache_bytes: int = DEFAULT_CACHE_BYTES):
        self.gram = np.asarray(gram, dtype=float)
        self.p = self.gram.shape[0]
        self.eta = check_eta(eta)
        self.cache_bytes = int(cache_bytes)
        self._inv: OrderedDict[tuple[int, int], np.ndarray] = OrderedDict()
        self._bytes = 0
        ev = np.linalg.eigvalsh(self.gram)
        self.low_ok = bool(ev[0] > 1.0 / self.eta - EDGE_TOL)
        self.top_ok = bool(ev[-1] < self.eta + EDGE_TOL)

    def _boundary_inverse(self, lo: int, hi: int) -> np.ndarray:
        key = (lo, hi)
        inv = self._inv.get(key)
        if inv is not None:
            self._inv.move_to_end(key)
            return inv
        B = self.gram[None, lo:hi, lo:hi]
        inv = _clipped_inverse_tail(B, self.eta, hi - lo, low_ok=self.low_ok, top_ok=self.top_ok)[0]
        if inv.nbytes <= self.cache_bytes:
            self._inv[key] = inv
            self._bytes += inv.nbytes
            while self._bytes > self.cache_bytes:
                _, old = self._inv.popitem(last=False)
                self._bytes -= old.nbytes
        return inv

    def block(self, start: int, k: int) -> tuple[np.ndarray, int, int]:
        """Local precision block for ``start`` and its target bounds."""
        lo, hi = cov_window(start, k, self.p)
        t_lo, t_hi = target_window(start, k, self.p)
        sel = slice(t_lo - lo, t_hi - lo)
        if lo == 0 or hi == self.p:
            blk = self._boundary_inverse(lo, hi)[sel, sel]
        else:
            order = np.r_[lo:t_lo, t_hi:hi, t_lo:t_hi]
            B = self.gram[np.ix_(order, order)][None]
            blk = _clipped_inverse_tail(B, self.eta, t_hi - t_lo, low_ok=self.low_ok, top_ok=self.top_ok)[0]
        return blk, t_lo, t_hi

    def total(self, k: int) -> np.ndarray:
        """Sum over starts ``1 - k, ..., p - 1`` of expanded size-``k`` blocks."""
        p = self.p
        out = np.zeros((p, p))
        # interior windows all have size 3k and are processed in stacks,
        # each window permuted so that its target block comes last
        first, last = k + 1, p - 2 * k - 1
        interior = {}
        if last >= first:
            starts = np.arange(first, last + 1)
            offsets = np.r_[0:k, 2 * k:3 * k, k:2 * k] - k
            per = max(1, _BATCH_BYTES // (8 * 9 * k * k))
            for c in range(0, starts.size, per):
                chunk = starts[c:c + per]
                pos = chunk[:, None] + offsets
                stack = self.gram[pos[:, :, None], pos[:, None, :]]
                blocks = _clipped_inverse_tail(stack, self.eta, k, low_ok=self.low_ok, top_ok=self.top_ok)
                for s, blk in zip(chunk, blocks):
                    interior[int(s)] = blk
        for start in range(1 - k, p):
            blk = interior.pop(start, None)
            if blk is not None:
                out[start:start + k, start:start + k] += blk
                continue
            blk, t_lo, t_hi = self.block(start, k)
            out[t_lo:t_hi, t_lo:t_hi] += blk
        return out


def _combine(big: np.ndarray, small: np.ndarray, k: int, eta: float) -> np.ndarray:
    return project_spectrum(symmetrize((big - small) / k), eta, symmetric=True)


def crop_from_gram(gram, k: int, eta: float, *, cache_bytes: int = DEFAULT_CACHE_BYTES) -> np.ndarray:
    """Cropping estimate computed from a given second-moment matrix."""
    gram = np.asarray(gram, dtype=float)
    p = gram.shape[0]
    cfg = CropConfig(k, eta)
    if cfg.k >= p:
        raise ValueError(f"bandwidth k={cfg.k} must be smaller than p={p}")
    sums = _BlockSums(gram, cfg.eta, cache_bytes)
    return _combine(sums.total(2 * cfg.k), sums.total(cfg.k), cfg.k, cfg.eta)


def crop_estimate(Z, cfg: CropConfig) -> np.ndarray:
    """Local cropping estimate of the precision matrix from data ``Z`` (n x p)."""
    return crop_from_gram(sample_gram(Z), cfg.k, cfg.eta)


class CropPath:
    """Cropping estimates for many bandwidths over one Gram matrix.

    Block sums are shared: the size-``2k`` sum used for bandwidth ``k`` is the
    size-``k`` sum of bandwidth ``2k``. Estimates are computed on demand and
    can be released once no longer needed.
    """

    def __init__(self, gram, eta: float, *, cache_bytes: int = DEFAULT_CACHE_BYTES):
        self._sums = _BlockSums(gram, eta, cache_bytes)
        self.p = self._sums.p
        self.eta = self._sums.eta
        self._totals: dict[int, np.ndarray] = {}
        self._estimates: dict[int, np.ndarray] = {}

    def _total(self, size: int) -> np.ndarray:
        tot = self._totals.get(size)
        if tot is None:
            tot = self._sums.total(size)
            self._totals[size] = tot
        return tot

    def estimate(self, k: int) -> np.ndarray:
        est = self._estimates.get(k)
        if est is not None:
            return est
        if not 1 <= k < self.p:
            raise ValueError(f"bandwidth k={k} must lie in [1, p)")
        est = _combine(self._total(2 * k), self._total(k), k, self.eta)
        self._estimates[k] = est
        # the size-k sum is still needed only as the large sum of bandwidth k/2
        if k % 2 or (k // 2) in self._estimates:
            self._totals.pop(k, None)
        if (2 * k) >= self.p or (2 * k) in self._estimates:
            self._totals.pop(2 * k, None)
        return est

    def release_below(self, k: int) -> None:
        """Forget estimates for bandwidths smaller than ``k``."""
        for key in [key for key in self._estimates if key < k]:
            del self._estimates[key]


def bandwidth_rule(space: str, alpha: float, n: int, *, rounding: str = "floor") -> int:
    """Bandwidth for a decay class.

    ``"Q"`` gives ``n^{1/(2 alpha + 1)}`` and ``"P"`` gives ``n^{1/(2 alpha)}``,
    rounded down by default (``rounding="ceil"`` rounds up). The result is
    at least 1; clamp to ``p - 1`` with :func:`clamp_bandwidth`.
    """
    alpha = float(alpha)
    if space == "Q":
        if alpha <= 0:
            raise ValueError("alpha must be positive for the Q class")
        expo = 1.0 / (2 * alpha + 1)
    elif space == "P":
        if alpha <= 0.5:
            raise ValueError("alpha must exceed 1/2 for the P class")
        expo = 1.0 / (2 * alpha)
    else:
        raise ValueError(f"unknown decay class {space!r}")
    val = float(n) ** expo
    # guard against 500**(1/3) landing a hair below an integer
    near = round(val)
    if abs(val - near) < 1e-9:
        val = float(near)
    if rounding == "floor":
        k = math.floor(val)
    elif rounding == "ceil":
        k = math.ceil(val)
    else:
        raise ValueError(f"unknown rounding {rounding!r}")
    return max(1, int(k))


def clamp_bandwidth(k: int, p: int) -> int:
    return int(min(max(k, 1), p - 1))


def window_spectrum(gram, k: int) -> tuple[float, float]:
    """Smallest and largest eigenvalue over all size-``3k`` windows of ``gram``.

    A guide for choosing ``eta`` by hand.
    """
    gram = np.asarray(gram, dtype=float)
    p = gram.shape[0]
    size = min(3 * k, p)
    lo_val, hi_val = np.inf, -np.inf
    for s in range(0, p - size + 1):
        w = np.linalg.eigvalsh(gram[s:s + size, s:s + size])
        lo_val = min(lo_val, w[0])
        hi_val = max(hi_val, w[-1])
    return float(lo_val), float(hi_val)
