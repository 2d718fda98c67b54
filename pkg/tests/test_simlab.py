from __future__ import annotations

import json

import numpy as np
import pytest

from bandchol.matcore import op_norm
from bandchol.simlab import (
    EstimatorSpec,
    ExperimentConfig,
    ModelSpec,
    RiskReport,
    apply_transform,
    build_truth,
    data_generator,
    gen_model,
    loss,
    make_generator,
    misspec_rows,
    model_generator,
    philox_key,
    run_experiment,
    sample_gaussian,
    spectral_bound,
    stream_id,
)


def test_q_decay_entries():
    A = gen_model(ModelSpec("Q_decay", 3, 1.0)).A
    assert A[1, 0] == -1.0 and A[2, 0] == -0.25 and A[2, 1] == -1.0
    A = gen_model(ModelSpec("Q_decay", 10, 1.0)).A
    assert A[4, 1] == pytest.approx(-1 / 9)


def test_p_firstcol_and_identity_entries():
    A = gen_model(ModelSpec("P_firstcol", 3, 1.0)).A
    want = np.zeros((3, 3))
    want[1, 0], want[2, 0] = -2.0, -1.0
    assert np.array_equal(A, want)
    model = gen_model(ModelSpec("identity", 4))
    assert np.array_equal(model.precision(), np.eye(4))
    assert np.array_equal(model.d, np.ones(4))


def test_misspec_rows_and_permutation():
    assert misspec_rows(500, 1) == [249]
    assert misspec_rows(500, 2) == [124, 249, 374]
    assert len(misspec_rows(500, 3)) == 7
    base = gen_model(ModelSpec("Q_decay", 64, 1.0)).A
    shuffled = gen_model(ModelSpec("Q_misspec", 64, 1.0, 2), make_generator(1)).A
    rows = misspec_rows(64, 2)
    for r in range(64):
        if r in rows:
            assert np.array_equal(np.sort(shuffled[r]), np.sort(base[r]))
            assert not np.array_equal(shuffled[r], base[r])
        else:
            assert np.array_equal(shuffled[r], base[r])
    with pytest.raises(ValueError):
        gen_model(ModelSpec("Q_misspec", 64, 1.0, 2))


def test_model_spec_validation():
    for bad in (dict(family="X", p=5), dict(family="Q_decay", p=1), dict(family="Q_decay", p=5, alpha=0),
                dict(family="Q_misspec", p=5), dict(family="Q_decay", p=5, level=1)):
        with pytest.raises(ValueError):
            ModelSpec(**bad)


def test_sampler_identity_lln():
    model = gen_model(ModelSpec("identity", 20))
    # the operator error concentrates near 2 sqrt(p/n) + p/n (spectral edge of
    # the sample covariance), about 0.30 at n = 50 p
    errs = []
    for n in (50 * 20, 500 * 20):
        Z = sample_gaussian(model, n, make_generator(4, n))
        errs.append(op_norm(Z.T @ Z / n - np.eye(20)))
        assert errs[-1] < 2 * np.sqrt(20 / n) + 20 / n + 0.05
    assert errs[1] < 0.2 < errs[0]


def test_sampler_matches_covariance_oracle():
    model = gen_model(ModelSpec("Q_decay", 3, 1.0))
    Z = sample_gaussian(model, 100_000, make_generator(5))
    sigma = np.linalg.inv(model.precision())
    assert np.max(np.abs(Z.T @ Z / len(Z) - sigma)) < 0.02


def test_sampler_deterministic():
    model = gen_model(ModelSpec("Q_decay", 30, 1.5))
    a = sample_gaussian(model, 40, make_generator(9, 1, 2))
    b = sample_gaussian(model, 40, make_generator(9, 1, 2))
    assert np.array_equal(a, b)
    assert np.array_equal(sample_gaussian(model, 5, 3), sample_gaussian(model, 5, 3))


def test_transforms():
    x = np.array([-1.0, 0.0, 2.0])
    assert np.array_equal(apply_transform(x, "identity"), x)
    assert np.array_equal(apply_transform(x, "cubic"), [-1.0, 0.0, 8.0])
    assert np.array_equal(apply_transform(x, "step"), [-2.0, 1.0, 9.0])
    with pytest.raises(ValueError):
        apply_transform(x, "log")


def test_losses():
    zero = np.zeros((2, 2))
    diff = np.array([[0.0, 3.0], [0.0, 0.0]])
    assert loss(diff, zero, "op") == pytest.approx(3.0)
    assert loss(diff, zero, "op_sq") == pytest.approx(9.0)
    assert loss(diff, zero, "frob_sq_avg") == pytest.approx(4.5)
    est = np.diag([2.0, 1.0, 1.0])
    assert loss(est, np.eye(3), "op") == pytest.approx(1.0)
    assert all(loss(est, est, k) == 0 for k in ("op", "op_sq", "frob_sq_avg"))
    with pytest.raises(ValueError):
        loss(np.eye(2), np.eye(3), "op")
    with pytest.raises(ValueError):
        loss(np.eye(2), np.eye(2), "max")


def test_spectral_bound_and_truth():
    model = gen_model(ModelSpec("Q_decay", 50, 1.0))
    truth = build_truth(model, 1.05)
    w = np.linalg.eigvalsh(truth.omega)
    assert truth.eta == pytest.approx(1.05 * max(w[-1], 1 / w[0]))
    assert spectral_bound(np.diag([0.5, 3.0])) == 3.0
    assert np.allclose(np.diag(np.linalg.inv(truth.corr_inverse)), 1.0)
    with pytest.raises(ValueError):
        spectral_bound(np.diag([-1.0, 1.0]))


def test_seed_streams_do_not_collide_over_table1_grid():
    keys = set()
    count = 0
    for p in (500, 1000, 2000):
        for alpha in (0.5, 1.0, 1.5, 2.0):
            words = stream_id(ModelSpec("Q_decay", p, alpha).key())
            for rep in range(100):
                keys.add(philox_key(20240607, *words, 0, rep))
                count += 1
                for n in (500, 1000, 2000, 4000):
                    keys.add(philox_key(20240607, *words, 1, n, rep))
                    count += 1
    assert len(keys) == count


def test_generators_follow_keys():
    cfg = ExperimentConfig(ModelSpec("Q_decay", 10), (EstimatorSpec("frob"),), (50,), reps=2)
    a = data_generator(cfg, 50, 1).standard_normal(3)
    b = data_generator(cfg, 50, 1).standard_normal(3)
    c = data_generator(cfg, 60, 1).standard_normal(3)
    d = model_generator(cfg, 1).standard_normal(3)
    assert np.array_equal(a, b) and not np.array_equal(a, c) and not np.array_equal(a, d)


def small_config(**kw):
    base = dict(
        model=ModelSpec("Q_decay", 30, 1.0),
        estimators=(
            EstimatorSpec("crop", label="crop.Q", rule="Q"),
            EstimatorSpec("banding", label="BL", rule="BL"),
            EstimatorSpec("frob"),
            EstimatorSpec("rank-crop", label="npn", rule="Q"),
            EstimatorSpec("adaptive", k_max=5),
        ),
        n_grid=(60, 120),
        reps=3,
        seed=5,
    )
    base.update(kw)
    return ExperimentConfig(**base)


def test_run_experiment_layout_and_means():
    cfg = small_config()
    rep = run_experiment(cfg)
    assert len(rep.cells) == len(cfg.estimators) * len(cfg.n_grid)
    for c in rep.cells:
        assert c.failure is None
        for kind in cfg.losses:
            assert len(c.losses[kind]) == cfg.reps
            assert abs(c.mean(kind) - sum(c.losses[kind]) / cfg.reps) <= 1e-12
    assert rep.cell("crop.Q", 60).bandwidths == [3, 3, 3]
    assert rep.provenance["config_sha256"] == cfg.digest()
    assert rep.provenance["generator"] == "numpy.Philox"


def test_single_replicate_identity_model():
    cfg = small_config(model=ModelSpec("identity", 12), reps=1, n_grid=(40,))
    rep = run_experiment(cfg)
    assert all(len(c.losses["op"]) == 1 and np.isnan(c.sd("op")) for c in rep.cells)


def test_run_experiment_independent_of_threads():
    cfg = small_config()
    assert run_experiment(cfg, threads=1).json_text() == run_experiment(cfg, threads=4).json_text()


def test_failing_estimator_only_aborts_its_cell():
    cfg = small_config(estimators=(EstimatorSpec("banding", label="wide", k=80), EstimatorSpec("crop", k=2)))
    rep = run_experiment(cfg)
    assert rep.cell("wide", 60).failure and "ValueError" in rep.cell("wide", 60).failure
    assert rep.cell("crop", 60).failure is None
    assert "replicate 0" in rep.csv_text()


def test_rank_losses_identical_across_transforms():
    est = (EstimatorSpec("rank-crop", label="npn", rule="Q"),
           EstimatorSpec("rank-crop", label="npn.s", rule="Q", rank="spearman", rescale=False))
    reports = [run_experiment(small_config(estimators=est, transform=t)) for t in ("identity", "cubic", "step")]
    for other in reports[1:]:
        for a, b in zip(reports[0].cells, other.cells):
            assert a.losses == b.losses


def test_report_serialization_round_trip(tmp_path):
    rep = run_experiment(small_config(reps=2))
    back = RiskReport.from_json_dict(json.loads(rep.json_text()))
    assert back.csv_text() == rep.csv_text() and back.json_text() == rep.json_text()
    rep.write(tmp_path / "r.csv", tmp_path / "r.json")
    assert (tmp_path / "r.csv").read_text() == rep.csv_text()
    header = rep.csv_text().splitlines()[0].split(",")
    assert header[:9] == ["model", "p", "alpha", "level", "transform", "estimator", "n", "k", "reps"]
    assert header[-1] == "failure"


def test_config_validation_and_round_trip():
    cfg = small_config()
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError):
        small_config(reps=0)
    with pytest.raises(ValueError):
        small_config(transform="log")
    with pytest.raises(ValueError):
        small_config(estimators=(EstimatorSpec("frob"), EstimatorSpec("frob")))
    with pytest.raises(ValueError):
        EstimatorSpec("crop")
    with pytest.raises(ValueError):
        EstimatorSpec("crop", k=2, rule="Q")
    with pytest.raises(ValueError):
        EstimatorSpec("banding", rule="Q")
    with pytest.raises(ValueError):
        EstimatorSpec("lasso")
