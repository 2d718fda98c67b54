"""Data-driven bandwidth for the cropping estimator by pairwise comparison.

A bandwidth ``k`` is acceptable when its estimate stays within
``C_L (log p + l) / n`` (squared operator norm) of the estimate at every
larger candidate ``l``; the smallest acceptable candidate is selected.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cropping import CropPath, sample_gram
from .matcore import check_eta


@dataclass(frozen=True)
class LepskiConfig:
    """Settings of the bandwidth search.

    Attributes
    ----------
    eta : float
        Spectral band of the underlying cropping estimates.
    c_l : float
        Comparison constant.
    k_max : int, optional
        Largest candidate; defaults to ``ceil(n / log p)`` clamped to ``p - 1``.
    dyadic : bool
        Restrict candidates to powers of two plus ``k_max``.
    """

    eta: float
    c_l: float = 2.0
    k_max: int | None = None
    dyadic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "eta", check_eta(self.eta))
        if not self.c_l > 0:
            raise ValueError("c_l must be positive")
        if self.k_max is not None and self.k_max < 1:
            raise ValueError("k_max must be positive")

    def resolved_k_max(self, n: int, p: int) -> int:
        k = self.k_max if self.k_max is not None else math.ceil(n / math.log(p))
        return int(min(max(k, 1), p - 1))

    def candidates(self, n: int, p: int) -> list[int]:
        top = self.resolved_k_max(n, p)
        if not self.dyadic:
            return list(range(1, top + 1))
        out = []
        k = 1
        while k < top:
            out.append(k)
            k *= 2
        out.append(top)
        return out

    def bound(self, l: int, n: int, p: int) -> float:
        return self.c_l * (math.log(p) + l) / n


@dataclass
class LepskiResult:
    """Selected bandwidth and the comparisons made to reach it."""

    k_hat: int
    candidates: list[int]
    distances: dict[tuple[int, int], float] = field(default_factory=dict)
    bounds: dict[int, float] = field(default_factory=dict)

    def distance(self, k: int, l: int) -> float:
        """Squared operator distance between the estimates at ``k`` and ``l``."""
        if k == l:
            return 0.0
        return self.distances[(min(k, l), max(k, l))]

    def distance_table(self) -> list[dict]:
        return [
            {"k": k, "l": l, "dist_sq": d, "bound": self.bounds[l]}
            for (k, l), d in sorted(self.distances.items())
        ]


def _sq_op_distance(X: np.ndarray, Y: np.ndarray) -> float:
    w = np.linalg.eigvalsh(X - Y)
    return float(max(-w[0], w[-1]) ** 2)


def _scan(path: CropPath, cfg: LepskiConfig, n: int, p: int, exhaustive: bool) -> LepskiResult:
    cands = cfg.candidates(n, p)
    result = LepskiResult(k_hat=cands[-1], candidates=cands)
    result.bounds = {l: cfg.bound(l, n, p) for l in cands}
    for pos, k in enumerate(cands):
        est_k = path.estimate(k)
        accepted = True
        for l in cands[pos + 1:]:
            key = (k, l)
            d = result.distances.get(key)
            if d is None:
                d = _sq_op_distance(est_k, path.estimate(l))
                result.distances[key] = d
            if d > result.bounds[l]:
                accepted = False
                if not exhaustive:
                    break
        if accepted:
            result.k_hat = k
            return result
        if not exhaustive and pos + 1 < len(cands):
            path.release_below(cands[pos + 1])
    return result


def lepski_select(Z, cfg: LepskiConfig, *, gram=None, path: CropPath | None = None) -> LepskiResult:
    """Smallest candidate bandwidth whose estimate agrees with all larger ones.

    Candidates are scanned in increasing order and each comparison stops at
    the first violated bound. If no candidate below ``k_max`` qualifies the
    result is ``k_max``, which trivially agrees with itself.

    Parameters
    ----------
    Z : ndarray, shape (n, p)
        Data; only its sample size is used when ``gram`` is given.
    cfg : LepskiConfig
    gram : ndarray, optional
        Precomputed second-moment matrix (or a rank-based substitute).
    path : CropPath, optional
        Reuse cached estimates from an existing path.
    """
    n, p = np.shape(Z)
    if n < 2 or p < 2:
        raise ValueError("need n >= 2 and p >= 2")
    if path is None:
        path = CropPath(sample_gram(Z) if gram is None else gram, cfg.eta)
    return _scan(path, cfg, n, p, exhaustive=False)


def lepski_full_scan(Z, cfg: LepskiConfig, *, gram=None) -> LepskiResult:
    """Reference search that evaluates every pair before deciding each candidate."""
    n, p = np.shape(Z)
    path = CropPath(sample_gram(Z) if gram is None else gram, cfg.eta)
    return _scan(path, cfg, n, p, exhaustive=True)


def adaptive_fit(Z, cfg: LepskiConfig, *, gram=None) -> tuple[np.ndarray, LepskiResult]:
    """Selected bandwidth together with the cropping estimate at that bandwidth."""
    n, p = np.shape(Z)
    path = CropPath(sample_gram(Z) if gram is None else gram, cfg.eta)
    sel = lepski_select(Z, cfg, path=path)
    return path.estimate(sel.k_hat), sel


def adaptive_estimate(Z, cfg: LepskiConfig) -> np.ndarray:
    """Cropping estimate at the data-driven bandwidth."""
    return adaptive_fit(Z, cfg)[0]
