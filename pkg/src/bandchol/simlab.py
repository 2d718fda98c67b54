"""Simulation designs, seeded samplers, losses and the replication engine.

Random streams come from counter-based Philox generators keyed by
``SeedSequence(master_seed, spawn_key=...)``. The key of a data stream is
derived from the model, the sample size and the replicate index, so every
estimator in an experiment sees the same data for a given replicate while
distinct replicates and sample sizes never share a stream.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg
from threadpoolctl import threadpool_limits

from .adaptive import LepskiConfig, adaptive_fit
from .cholreg import ThresholdConfig, banding_bandwidth, banding_estimate, frob_estimate
from .cropping import bandwidth_rule, clamp_bandwidth, crop_from_gram, sample_gram
from .matcore import CholeskyModel, check_eta, frob_norm, op_norm, recompose, symmetrize
from .rankcov import rank_matrix, rescale_to_diagonal

FAMILIES = ("Q_decay", "P_firstcol", "Q_misspec", "identity")
TRANSFORMS = ("identity", "cubic", "step")
LOSSES = ("op", "op_sq", "frob_sq_avg")
METHODS = ("crop", "frob", "banding", "adaptive", "rank-crop")
GENERATOR = "numpy.Philox"


@dataclass(frozen=True)
class ModelSpec:
    """Generating model: ``family``, dimension ``p``, decay rate ``alpha``.

    ``level`` (1, 2 or 3) is required for ``Q_misspec`` and selects how many
    rows get their coefficients shuffled.
    """

    family: str
    p: int
    alpha: float = 1.0
    level: int | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")
        if int(self.p) != self.p or self.p < 2:
            raise ValueError("p must be an integer >= 2")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.family == "Q_misspec":
            if self.level not in (1, 2, 3):
                raise ValueError("Q_misspec needs level 1, 2 or 3")
        elif self.level is not None:
            raise ValueError("level only applies to Q_misspec")
        object.__setattr__(self, "p", int(self.p))
        object.__setattr__(self, "alpha", float(self.alpha))

    def key(self) -> str:
        return f"{self.family}|p={self.p}|alpha={self.alpha!r}|level={self.level}"


def misspec_rows(p: int, level: int) -> list[int]:
    """0-based rows ``floor(j p / 2^level) - 1`` for ``j = 1 .. 2^level - 1``."""
    return [(j * p) // 2**level - 1 for j in range(1, 2**level)]


def gen_model(spec: ModelSpec, rng: np.random.Generator | None = None) -> CholeskyModel:
    """Build the Cholesky factors of a simulation design (unit residual variances).

    ``rng`` is only consumed by ``Q_misspec``, which shuffles the nonzero
    prefix of each selected row.
    """
    p, alpha = spec.p, spec.alpha
    A = np.zeros((p, p))
    if spec.family in ("Q_decay", "Q_misspec"):
        i, j = np.tril_indices(p, -1)
        A[i, j] = -((i - j).astype(float) ** (-alpha - 1.0))
    elif spec.family == "P_firstcol":
        A[1:, 0] = -2.0 * np.arange(1, p, dtype=float) ** (-alpha)
    if spec.family == "Q_misspec":
        if rng is None:
            raise ValueError("Q_misspec needs a random generator")
        for r in misspec_rows(p, spec.level):
            if r >= 1:
                A[r, :r] = A[r, :r][rng.permutation(r)]
    return CholeskyModel(A=A, d=np.ones(p))


def spectral_bound(omega) -> float:
    """``max(lambda_max, 1 / lambda_min)`` of a symmetric positive definite matrix."""
    w = np.linalg.eigvalsh(omega)
    if w[0] <= 0:
        raise ValueError("matrix is not positive definite")
    return float(max(w[-1], 1.0 / w[0]))


def make_generator(seed: int, *key: int) -> np.random.Generator:
    """Philox generator for ``seed`` and an integer stream key."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def philox_key(seed: int, *key: int) -> tuple[int, ...]:
    """The 128-bit Philox key that :func:`make_generator` would use."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return tuple(int(x) for x in ss.generate_state(2, np.uint64))


def stream_id(text: str) -> tuple[int, int]:
    """Two 32-bit words identifying ``text`` (stable across runs and machines)."""
    h = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(h[:4], "little"), int.from_bytes(h[4:8], "little")


def sample_gaussian(model: CholeskyModel, n: int, rng) -> np.ndarray:
    """Draw ``n`` rows from ``N(0, Sigma)`` through the autoregressive recursion.

    Row ``x`` solves ``(I - A) x = sqrt(d) * e`` with standard normal ``e``.
    ``rng`` is a generator or an integer seed.
    """
    if not isinstance(rng, np.random.Generator):
        rng = make_generator(int(rng))
    E = rng.standard_normal((n, model.p))
    L = np.eye(model.p) - model.A
    X = scipy.linalg.solve_triangular(L, (E * np.sqrt(model.d)).T, lower=True)
    return np.ascontiguousarray(X.T)


def apply_transform(Z, kind: str) -> np.ndarray:
    """Entrywise increasing transform: ``identity``, ``cubic`` or ``step``.

    ``step`` maps ``x`` to ``x^3 + 1`` for ``x >= 0`` and ``x^3 - 1`` otherwise.
    """
    Z = np.asarray(Z, dtype=float)
    if kind == "identity":
        return Z.copy()
    if kind == "cubic":
        return Z**3
    if kind == "step":
        return np.where(Z >= 0, Z**3 + 1.0, Z**3 - 1.0)
    raise ValueError(f"unknown transform {kind!r}")


def loss(est, truth, kind: str) -> float:
    """``op`` is the spectral norm of the error, ``op_sq`` its square and
    ``frob_sq_avg`` the squared Frobenius norm divided by ``p``."""
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if est.shape != truth.shape:
        raise ValueError(f"dimension mismatch {est.shape} vs {truth.shape}")
    diff = est - truth
    if kind == "op":
        return op_norm(diff)
    if kind == "op_sq":
        return op_norm(diff) ** 2
    if kind == "frob_sq_avg":
        return frob_norm(diff) ** 2 / diff.shape[0]
    raise ValueError(f"unknown loss {kind!r}")


@dataclass(frozen=True)
class EstimatorSpec:
    """One estimator of an experiment.

    Attributes
    ----------
    method : str
        ``crop``, ``frob``, ``banding``, ``adaptive`` or ``rank-crop``.
    label : str
        Identifier used in reports; defaults to the method name.
    k : int, optional
        Explicit bandwidth (crop, banding, rank-crop).
    rule : str, optional
        Bandwidth rule: ``Q`` or ``P`` for cropping, ``BL`` for banding.
    rounding : str
        ``floor`` or ``ceil`` for the ``Q`` and ``P`` rules.
    eta : float, optional
        Fixed spectral band; by default derived from the generating model.
    c : float
        Window divisor of the block-thresholding estimator.
    c_l : float
        Comparison constant of the adaptive estimator.
    k_max : int, optional
        Largest adaptive candidate.
    dyadic : bool
        Dyadic adaptive candidates.
    rank : str
        ``kendall`` or ``spearman`` for rank-crop.
    rescale : bool
        Rescale rank-crop estimates to the true precision diagonal before
        scoring (simulation-only device).
    """

    method: str
    label: str = ""
    k: int | None = None
    rule: str | None = None
    rounding: str = "floor"
    eta: float | None = None
    c: float = 4.0
    c_l: float = 2.0
    k_max: int | None = None
    dyadic: bool = False
    rank: str = "kendall"
    rescale: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not self.label:
            object.__setattr__(self, "label", self.method)
        if self.method in ("crop", "rank-crop"):
            if (self.k is None) == (self.rule is None):
                raise ValueError(f"{self.label}: give exactly one of k and rule")
            if self.rule is not None and self.rule not in ("Q", "P"):
                raise ValueError(f"{self.label}: cropping rule must be Q or P")
        if self.method == "banding":
            if (self.k is None) == (self.rule is None):
                raise ValueError(f"{self.label}: give exactly one of k and rule")
            if self.rule is not None and self.rule != "BL":
                raise ValueError(f"{self.label}: banding rule must be BL")
        if self.rank not in ("kendall", "spearman"):
            raise ValueError(f"unknown rank method {self.rank!r}")
        if self.eta is not None:
            check_eta(self.eta)

    def bandwidth(self, alpha: float, n: int, p: int) -> int | None:
        if self.method in ("frob", "adaptive"):
            return None
        if self.k is not None:
            return int(self.k)
        if self.rule == "BL":
            return banding_bandwidth(alpha, n, p)
        return clamp_bandwidth(bandwidth_rule(self.rule, alpha, n, rounding=self.rounding), p)


@dataclass(frozen=True)
class ExperimentConfig:
    """A grid of sample sizes crossed with estimators on one generating model."""

    model: ModelSpec
    estimators: tuple[EstimatorSpec, ...]
    n_grid: tuple[int, ...]
    reps: int = 100
    seed: int = 20240607
    transform: str = "identity"
    losses: tuple[str, ...] = LOSSES
    eta_factor: float = 1.05

    def __post_init__(self):
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "n_grid", tuple(int(n) for n in self.n_grid))
        object.__setattr__(self, "losses", tuple(self.losses))
        if not self.estimators:
            raise ValueError("at least one estimator is required")
        labels = [e.label for e in self.estimators]
        if len(set(labels)) != len(labels):
            raise ValueError("estimator labels must be unique")
        if not self.n_grid or min(self.n_grid) < 2:
            raise ValueError("sample sizes must be >= 2")
        if int(self.reps) != self.reps or self.reps < 1:
            raise ValueError("reps must be a positive integer")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}")
        for kind in self.losses:
            if kind not in LOSSES:
                raise ValueError(f"unknown loss {kind!r}")
        if not self.eta_factor >= 1:
            raise ValueError("eta_factor must be at least 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimators"] = [asdict(e) for e in self.estimators]
        d["n_grid"] = list(self.n_grid)
        d["losses"] = list(self.losses)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["model"] = ModelSpec(**d["model"])
        d["estimators"] = tuple(EstimatorSpec(**e) for e in d["estimators"])
        return cls(**d)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class CellResult:
    """Losses of one estimator at one sample size across replicates."""

    estimator: str
    n: int
    losses: dict[str, list[float]] = field(default_factory=dict)
    bandwidths: list[int | None] = field(default_factory=list)
    failure: str | None = None

    def mean(self, kind: str) -> float:
        vals = self.losses.get(kind) or []
        return float(np.mean(vals)) if vals and self.failure is None else math.nan

    def sd(self, kind: str) -> float:
        vals = self.losses.get(kind) or []
        if self.failure is not None or len(vals) < 2:
            return math.nan
        return float(np.std(vals, ddof=1))


@dataclass
class RiskReport:
    """Per-replicate losses for every (estimator, n) cell plus provenance."""

    config: ExperimentConfig
    cells: list[CellResult]
    provenance: dict

    def cell(self, estimator: str, n: int) -> CellResult:
        for c in self.cells:
            if c.estimator == estimator and c.n == n:
                return c
        raise KeyError((estimator, n))

    @property
    def failed(self) -> list[CellResult]:
        return [c for c in self.cells if c.failure is not None]

    def csv_text(self) -> str:
        m = self.config.model
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["model", "p", "alpha", "level", "transform", "estimator", "n", "k", "reps"]
        for kind in self.config.losses:
            header += [f"mean_{kind}", f"sd_{kind}"]
        header.append("failure")
        w.writerow(header)
        for c in self.cells:
            ks = sorted({k for k in c.bandwidths if k is not None})
            k_txt = str(ks[0]) if len(ks) == 1 else ("" if not ks else "adaptive")
            row = [m.family, m.p, repr(m.alpha), "" if m.level is None else m.level,
                   self.config.transform, c.estimator, c.n, k_txt, self.config.reps]
            for kind in self.config.losses:
                row += [_fmt(c.mean(kind)), _fmt(c.sd(kind))]
            row.append(c.failure or "")
            w.writerow(row)
        return buf.getvalue()

    def to_json_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "provenance": self.provenance,
            "cells": [
                {
                    "estimator": c.estimator,
                    "n": c.n,
                    "losses": c.losses,
                    "bandwidths": c.bandwidths,
                    "failure": c.failure,
                    "mean": {k: _json_float(c.mean(k)) for k in self.config.losses},
                    "sd": {k: _json_float(c.sd(k)) for k in self.config.losses},
                }
                for c in self.cells
            ],
        }

    def json_text(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, csv_path, json_path) -> None:
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.csv_text())
        with open(json_path, "w", encoding="utf-8") as fh:
            fh.write(self.json_text())

    @classmethod
    def from_json_dict(cls, d: dict) -> "RiskReport":
        cfg = ExperimentConfig.from_dict(d["config"])
        cells = [
            CellResult(c["estimator"], int(c["n"]), {k: list(v) for k, v in c["losses"].items()},
                       list(c["bandwidths"]), c["failure"])
            for c in d["cells"]
        ]
        return cls(cfg, cells, dict(d["provenance"]))


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def _json_float(x: float):
    return None if math.isnan(x) else float(x)


@dataclass
class Truth:
    """Everything an estimator run needs to know about the generating model."""

    model: CholeskyModel
    omega: np.ndarray
    eta: float
    corr_inverse: np.ndarray
    corr_eta: float


def build_truth(model: CholeskyModel, eta_factor: float) -> Truth:
    omega = recompose(model)
    sigma = model.covariance()
    s = np.sqrt(np.diag(sigma))
    # precision of the latent correlation matrix, the target of rank methods
    corr_inv = symmetrize(omega * np.outer(s, s))
    return Truth(model, omega, eta_factor * spectral_bound(omega), corr_inv,
                 eta_factor * spectral_bound(corr_inv))


def fit_estimator(spec: EstimatorSpec, Z: np.ndarray, truth: Truth, alpha: float,
                  gram: np.ndarray | None = None):
    """Fit one estimator; returns ``(estimate, reference, bandwidth)``."""
    n, p = Z.shape
    k = spec.bandwidth(alpha, n, p)
    if spec.method == "rank-crop":
        eta = spec.eta or truth.corr_eta
        est = crop_from_gram(rank_matrix(Z, spec.rank), k, eta)
        if spec.rescale:
            return rescale_to_diagonal(est, np.diag(truth.omega)), truth.omega, k
        return est, truth.corr_inverse, k
    eta = spec.eta or truth.eta
    if spec.method == "crop":
        return crop_from_gram(sample_gram(Z) if gram is None else gram, k, eta), truth.omega, k
    if spec.method == "banding":
        return banding_estimate(Z, k), truth.omega, k
    if spec.method == "frob":
        return frob_estimate(Z, ThresholdConfig(alpha=alpha, eta=eta, c=spec.c)), truth.omega, None
    cfg = LepskiConfig(eta=eta, c_l=spec.c_l, k_max=spec.k_max, dyadic=spec.dyadic)
    est, sel = adaptive_fit(Z, cfg, gram=gram)
    return est, truth.omega, sel.k_hat


def model_generator(cfg: ExperimentConfig, rep: int) -> np.random.Generator:
    return make_generator(cfg.seed, *stream_id(cfg.model.key()), 0, rep)


def data_generator(cfg: ExperimentConfig, n: int, rep: int) -> np.random.Generator:
    return make_generator(cfg.seed, *stream_id(cfg.model.key()), 1, n, rep)


def replicate_data(cfg: ExperimentConfig, n: int, rep: int):
    """Generating model and (transformed) data for one replicate."""
    model = gen_model(cfg.model, model_generator(cfg, rep))
    Z = sample_gaussian(model, n, data_generator(cfg, n, rep))
    return model, apply_transform(Z, cfg.transform)


def _run_unit(cfg: ExperimentConfig, n: int, rep: int) -> dict:
    model, Z = replicate_data(cfg, n, rep)
    truth = build_truth(model, cfg.eta_factor)
    gram = sample_gram(Z)
    out = {}
    for spec in cfg.estimators:
        try:
            est, ref, k = fit_estimator(spec, Z, truth, cfg.model.alpha, gram)
            out[spec.label] = ({kind: loss(est, ref, kind) for kind in cfg.losses}, k, None)
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            out[spec.label] = (None, None, f"{type(exc).__name__}: {exc}")
    return out


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> RiskReport:
    """Run every (sample size, replicate) unit and collect losses per cell.

    Units run on up to ``threads`` worker threads with BLAS limited to one
    thread each, and are reduced in a fixed order, so the report does not
    depend on ``threads``. A failing estimator aborts only its own cell.
    """
    threads = max(1, int(threads))
    units = [(n, r) for n in cfg.n_grid for r in range(cfg.reps)]
    with threadpool_limits(limits=1):
        if threads == 1:
            results = [_run_unit(cfg, n, r) for n, r in units]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(lambda u: _run_unit(cfg, *u), units))
    by_unit = dict(zip(units, results))
    cells = []
    for spec in cfg.estimators:
        for n in cfg.n_grid:
            cell = CellResult(spec.label, n, {kind: [] for kind in cfg.losses})
            for r in range(cfg.reps):
                vals, k, err = by_unit[(n, r)][spec.label]
                if err is not None:
                    cell.failure = f"replicate {r}: {err}"
                    break
                for kind in cfg.losses:
                    cell.losses[kind].append(vals[kind])
                cell.bandwidths.append(k)
            cells.append(cell)
    provenance = {
        "config_sha256": cfg.digest(),
        "seed": int(cfg.seed),
        "generator": GENERATOR,
        "numpy": np.__version__,
    }
    return RiskReport(cfg, cells, provenance)
