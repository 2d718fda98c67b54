"""Command-line front end.

    bandchol {generate|estimate|simulate|report} [--config PATH] [flags]

Each command reads an optional JSON config, applies flag overrides, rejects
unknown keys and writes the resolved config to ``<out>/config.resolved.json``
before doing any work.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 simulation with some (not all) failed cells.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import matio
from .adaptive import LepskiConfig, adaptive_fit
from .cholreg import ThresholdConfig, banding_bandwidth, banding_estimate, frob_estimate
from .cropping import bandwidth_rule, clamp_bandwidth, crop_from_gram, sample_gram
from .matcore import check_eta
from .rankcov import rank_matrix
from .simlab import (
    ExperimentConfig,
    ModelSpec,
    RiskReport,
    gen_model,
    make_generator,
    run_experiment,
    sample_gaussian,
    spectral_bound,
    stream_id,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_PARTIAL = 4

THREADS_ENV = "BANDCHOL_THREADS"


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


def _strict(cls, data: dict, where: str):
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class GenerateConfig:
    model: dict
    n: int = 100
    seed: int = 0
    format: str = "text"
    out: str = "."

    def __post_init__(self):
        self.model_spec = _strict(ModelSpec, dict(self.model), "model")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("n must be a positive integer")
        if self.format not in ("text", "binary"):
            raise ValueError("format must be text or binary")

    def to_dict(self) -> dict:
        return {"model": dict(self.model), "n": self.n, "seed": self.seed,
                "format": self.format, "out": self.out}


@dataclass
class EstimateConfig:
    data: str
    method: str
    k: int | None = None
    rule: str | None = None
    rounding: str = "floor"
    alpha: float | None = None
    eta: float | None = None
    c: float = 4.0
    c_l: float = 2.0
    k_max: int | None = None
    dyadic: bool = False
    rank: str = "kendall"
    format: str = "text"
    out: str = "."

    def __post_init__(self):
        methods = ("crop", "frob", "banding", "adaptive", "rank-crop")
        if self.method not in methods:
            raise ValueError(f"method must be one of {', '.join(methods)}")
        if self.method != "banding" and self.eta is None:
            raise ValueError(
                f"eta is required for {self.method}: the estimate is projected onto "
                "matrices with spectrum in [1/eta, eta]"
            )
        if self.eta is not None:
            check_eta(self.eta)
        if self.method in ("crop", "banding", "rank-crop"):
            if self.k is None and self.rule is None:
                raise ValueError(f"{self.method} needs k or a bandwidth rule")
            if self.rule is not None and self.alpha is None:
                raise ValueError("a bandwidth rule needs alpha")
        if self.method == "frob" and self.alpha is None:
            raise ValueError("frob needs alpha")
        if self.rank not in ("kendall", "spearman"):
            raise ValueError("rank must be kendall or spearman")
        if self.format not in ("text", "binary"):
            raise ValueError("format must be text or binary")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SimulateConfig:
    experiment: dict
    threads: int = 1
    out: str = "."

    def __post_init__(self):
        exp = dict(self.experiment)
        allowed = {f.name for f in fields(ExperimentConfig)}
        unknown = sorted(set(exp) - allowed)
        if unknown:
            raise ValueError(f"experiment: unknown key(s) {', '.join(unknown)}")
        if "model" not in exp or "estimators" not in exp or "n_grid" not in exp:
            raise ValueError("experiment needs model, estimators and n_grid")
        from .simlab import EstimatorSpec

        exp["model"] = _strict(ModelSpec, dict(exp["model"]), "experiment.model")
        exp["estimators"] = tuple(
            _strict(EstimatorSpec, dict(e), f"experiment.estimators[{i}]")
            for i, e in enumerate(exp["estimators"])
        )
        self.experiment_config = ExperimentConfig(**exp)
        if int(self.threads) != self.threads or self.threads < 1:
            raise ValueError("threads must be a positive integer")

    def to_dict(self) -> dict:
        return {"experiment": self.experiment_config.to_dict(), "threads": self.threads, "out": self.out}


@dataclass
class ReportConfig:
    inputs: list = field(default_factory=list)
    out: str = "."

    def __post_init__(self):
        if not self.inputs:
            raise ValueError("report needs at least one input report")
        self.inputs = [str(p) for p in self.inputs]

    def to_dict(self) -> dict:
        return {"inputs": list(self.inputs), "out": self.out}


CONFIG_TYPES = {
    "generate": GenerateConfig,
    "estimate": EstimateConfig,
    "simulate": SimulateConfig,
    "report": ReportConfig,
}


def parse_config(command: str, data: dict):
    """Validate a config dict for ``command`` (unknown keys are rejected)."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return _strict(CONFIG_TYPES[command], dict(data), command)


def _load_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc


def _overrides(command: str, args: argparse.Namespace) -> dict:
    out = {}
    if args.out is not None:
        out["out"] = args.out
    if command == "generate":
        if args.seed is not None:
            out["seed"] = args.seed
    if command == "estimate":
        for flag, key in (("method", "method"), ("k", "k"), ("alpha", "alpha"), ("eta", "eta"),
                          ("cl", "c_l"), ("c", "c"), ("rank", "rank"), ("data", "data"),
                          ("rule", "rule")):
            val = getattr(args, flag, None)
            if val is not None:
                out[key] = val
    if command == "simulate":
        if args.threads is not None:
            out["threads"] = args.threads
        elif os.environ.get(THREADS_ENV):
            try:
                out["threads"] = int(os.environ[THREADS_ENV])
            except ValueError as exc:
                raise ConfigError(f"{THREADS_ENV} must be an integer") from exc
    if command == "report" and args.inputs:
        out["inputs"] = list(args.inputs)
    return out


def resolve_config(command: str, args: argparse.Namespace):
    data = _load_json(args.config) if args.config else {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    data = dict(data)
    over = _overrides(command, args)
    if command == "simulate" and args.seed is not None:
        exp = dict(data.get("experiment", {}))
        exp["seed"] = args.seed
        data["experiment"] = exp
    data.update(over)
    return parse_config(command, data)


def _write_resolved(cfg, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.resolved.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _ext(fmt: str) -> str:
    return ".bin" if fmt == "binary" else ".txt"


def cmd_generate(cfg: GenerateConfig) -> int:
    out = Path(cfg.out)
    spec = cfg.model_spec
    key = stream_id(spec.key())
    model = gen_model(spec, make_generator(cfg.seed, *key, 0, 0))
    Z = sample_gaussian(model, cfg.n, make_generator(cfg.seed, *key, 1, cfg.n, 0))
    omega = model.precision()
    ext = _ext(cfg.format)
    matio.write_matrix(out / f"A{ext}", model.A)
    matio.write_matrix(out / f"D{ext}", model.d[None, :])
    matio.write_matrix(out / f"omega{ext}", omega)
    matio.write_matrix(out / f"sigma{ext}", model.covariance())
    matio.write_matrix(out / f"data{ext}", Z)
    bound = spectral_bound(omega)
    print(f"spectral bound of the precision matrix: {bound!r} (eta must exceed it)")
    return EXIT_OK


def _bandwidth(cfg: EstimateConfig, n: int, p: int) -> int:
    if cfg.k is not None:
        return int(cfg.k)
    if cfg.rule == "BL":
        return banding_bandwidth(cfg.alpha, n, p)
    if cfg.rule in ("Q", "P"):
        return clamp_bandwidth(bandwidth_rule(cfg.rule, cfg.alpha, n, rounding=cfg.rounding), p)
    raise ConfigError(f"unknown bandwidth rule {cfg.rule!r}")


def cmd_estimate(cfg: EstimateConfig) -> int:
    out = Path(cfg.out)
    try:
        Z = matio.read_matrix(cfg.data)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read data {cfg.data}: {exc}") from exc
    n, p = Z.shape
    meta: dict = {"method": cfg.method, "n": n, "p": p, "parameters": cfg.to_dict()}
    t0 = time.perf_counter()
    if cfg.method == "crop":
        k = _bandwidth(cfg, n, p)
        est = crop_from_gram(sample_gram(Z), k, cfg.eta)
        meta["k"] = k
    elif cfg.method == "rank-crop":
        k = _bandwidth(cfg, n, p)
        est = crop_from_gram(rank_matrix(Z, cfg.rank), k, cfg.eta)
        meta["k"] = k
    elif cfg.method == "banding":
        k = _bandwidth(cfg, n, p)
        est = banding_estimate(Z, k)
        meta["k"] = k
    elif cfg.method == "frob":
        tc = ThresholdConfig(alpha=cfg.alpha, eta=cfg.eta, c=cfg.c)
        est = frob_estimate(Z, tc)
        meta["k0"], meta["k1"] = tc.windows(n)
    else:
        lc = LepskiConfig(eta=cfg.eta, c_l=cfg.c_l, k_max=cfg.k_max, dyadic=cfg.dyadic)
        est, sel = adaptive_fit(Z, lc)
        meta["k"] = sel.k_hat
        meta["distances"] = sel.distance_table()
    elapsed = time.perf_counter() - t0
    matio.write_matrix(out / f"estimate{_ext(cfg.format)}", est)
    with open(out / "estimate.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    # wall time lives apart so the other outputs stay byte-identical across runs
    with open(out / "timing.json", "w", encoding="utf-8") as fh:
        json.dump({"wall_seconds": elapsed}, fh)
        fh.write("\n")
    return EXIT_OK


def cmd_simulate(cfg: SimulateConfig) -> int:
    out = Path(cfg.out)
    report = run_experiment(cfg.experiment_config, threads=cfg.threads)
    report.write(out / "report.csv", out / "report.json")
    failed = report.failed
    for c in failed:
        print(f"cell {c.estimator} n={c.n} failed: {c.failure}", file=sys.stderr)
    if failed and len(failed) == len(report.cells):
        return EXIT_NUMERIC
    if failed:
        return EXIT_PARTIAL
    return EXIT_OK


RATE_CLASS = {"Q_decay": "Q", "Q_misspec": "Q", "P_firstcol": "P"}


def rate_x(rate_class: str, alpha: float, n: int) -> float:
    """Rate-theoretic x-axis: ``n^{-2a/(2a+1)}`` for Q and ``n^{-(2a-1)/(2a)}`` for P."""
    if rate_class == "Q":
        return n ** (-2 * alpha / (2 * alpha + 1))
    if rate_class == "P":
        return n ** (-(2 * alpha - 1) / (2 * alpha))
    raise ValueError(f"unknown rate class {rate_class!r}")


PLOT_HEADER = ["model", "p", "alpha", "level", "transform", "estimator", "n",
               "rate_class", "x_rate", "x_logp_over_n", "mean_op_sq"]


def plot_rows(reports: list[RiskReport]) -> list[list]:
    """Tidy rows of squared loss against the rate axes, sorted and de-duplicated."""
    seen = {}
    for rep in reports:
        m = rep.config.model
        cls = RATE_CLASS.get(m.family, "")
        for c in rep.cells:
            key = (m.family, m.p, m.alpha, -1 if m.level is None else m.level,
                   rep.config.transform, c.estimator, c.n)
            if key in seen:
                continue
            y = c.mean("op_sq") if "op_sq" in c.losses else math.nan
            x = rate_x(cls, m.alpha, c.n) if cls else math.nan
            seen[key] = [m.family, m.p, repr(m.alpha), "" if m.level is None else m.level,
                         rep.config.transform, c.estimator, c.n, cls,
                         _fmt(x), _fmt(math.log(m.p) / c.n), _fmt(y)]
    return [seen[k] for k in sorted(seen)]


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def cmd_report(cfg: ReportConfig) -> int:
    out = Path(cfg.out)
    reports = []
    for path in cfg.inputs:
        try:
            with open(path, encoding="utf-8") as fh:
                reports.append(RiskReport.from_json_dict(json.load(fh)))
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read report {path}: {exc}") from exc
    with open(out / "plot_data.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLOT_HEADER)
        w.writerows(plot_rows(reports))
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "estimate": cmd_estimate,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bandchol", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--out", help="output directory")
        if name == "estimate":
            sp.add_argument("--data", help="data matrix file (.txt or .bin)")
            sp.add_argument("--method", choices=["crop", "frob", "banding", "adaptive", "rank-crop"])
            sp.add_argument("--k", type=int)
            sp.add_argument("--rule", choices=["Q", "P", "BL"])
            sp.add_argument("--alpha", type=float)
            sp.add_argument("--eta", type=float)
            sp.add_argument("--cl", type=float)
            sp.add_argument("--c", type=float)
            sp.add_argument("--rank", choices=["kendall", "spearman"])
        if name == "report":
            sp.add_argument("inputs", nargs="*", help="report JSON files")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = resolve_config(args.command, args)
        _write_resolved(cfg, Path(cfg.out))
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"bandchol: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"bandchol: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"bandchol: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
