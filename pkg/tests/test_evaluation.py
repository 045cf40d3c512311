import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ggreg import evaluation as ev
from ggreg import simulation as sim
from ggreg import solver
from ggreg.exceptions import DimensionMismatch, GGRegError
from ggreg.graph_regression import build_node_design, group_lasso_penalty
from ggreg.two_step import FittedModel, PipelineConfig, fit_pipeline

from oracles import proximal_gradient


def _small(seed=0, n=150, p=6, q=4):
    return sim.simulate(sim.SimConfig(n=n, p=p, q=q, q_e=2, v_e=0.3, s_gamma=0.2, seed=seed))


def _as_fitted(truth):
    return FittedModel(truth.gamma.copy(), [], truth.precision)


# selection metrics

def test_perfect_recovery():
    m = ev.selection_metrics({1, 4}, {1, 4}, 10)
    assert (m.tpr, m.fpr, m.f1) == (1.0, 0.0, 1.0)


def test_empty_estimate():
    m = ev.selection_metrics(set(), {1, 4}, 10)
    assert m.tpr == 0.0 and m.f1 == 0.0 and m.fpr == 0.0


def test_hand_counts():
    m = ev.selection_metrics({1, 2, 3}, {2, 3, 4}, 10)
    assert (m.tp, m.fp, m.fn, m.tn) == (2, 1, 1, 6)
    assert m.f1 == pytest.approx(2 / 3)
    assert m.tpr == pytest.approx(2 / 3)
    assert m.fpr == pytest.approx(1 / 7)


def test_degenerate_conventions():
    assert ev.selection_metrics(set(), set(), 5).tpr == 1.0
    assert math.isnan(ev.selection_metrics(set(), set(), 5).f1)
    assert math.isnan(ev.selection_metrics({0, 1}, set(), 5).tpr)
    assert math.isnan(ev.selection_metrics({0, 1}, {0, 1}, 2).fpr)


def test_out_of_range_support():
    with pytest.raises(ValueError):
        ev.selection_metrics({10}, set(), 10)


@given(st.integers(0, 10_000), st.integers(1, 40))
def test_metric_formulas_and_relabeling(seed, size):
    rng = np.random.default_rng(seed)
    est = set(np.flatnonzero(rng.random(size) < 0.4).tolist())
    true = set(np.flatnonzero(rng.random(size) < 0.4).tolist())
    m = ev.selection_metrics(est, true, size)
    assert m.tp + m.fp + m.fn + m.tn == size
    if m.tp + m.fn:
        assert m.tpr == m.tp / (m.tp + m.fn)
    if 2 * m.tp + m.fp + m.fn:
        assert m.f1 == 2 * m.tp / (2 * m.tp + m.fp + m.fn)
    perm = rng.permutation(size)
    m2 = ev.selection_metrics({int(perm[i]) for i in est}, {int(perm[i]) for i in true}, size)
    assert (m2.tp, m2.fp, m2.fn, m2.tn) == (m.tp, m.fp, m.fn, m.tn)


# estimation errors

def test_truth_has_zero_error():
    truth, _ = _small()
    assert ev.estimation_errors(_as_fitted(truth), truth) == (0.0, 0.0)
    scores = ev.evaluate_fit(_as_fitted(truth), truth)
    assert scores["f1_beta"] == 1.0 and scores["f1_gamma"] == 1.0


def test_gamma_error_single_entry():
    truth, _ = _small()
    fitted = _as_fitted(truth)
    fitted.gamma_hat[2, 1] += 0.3
    assert ev.estimation_errors(fitted, truth)[0] == pytest.approx(0.3)


def test_beta_error_three_four_five():
    T = np.zeros((2, 2, 2))
    E = np.zeros((2, 2, 2))
    E[0, 0, 1] = 0.3
    E[1, 0, 1] = 0.4
    assert ev.beta_l2_sum(E, T) == pytest.approx(0.5)


def test_error_shape_checks():
    with pytest.raises(DimensionMismatch):
        ev.beta_l2_sum(np.zeros((2, 3, 3)), np.zeros((1, 3, 3)))
    truth, _ = _small()
    other, _ = _small(p=5)
    with pytest.raises(DimensionMismatch):
        ev.evaluate_fit(_as_fitted(other), truth)


def test_beta_support_indexing():
    B = np.zeros((2, 3, 3))
    B[0, 0, 2] = B[0, 2, 0] = 1.0
    B[1, 1, 2] = B[1, 2, 1] = -1.0
    # upper pairs are (0,1), (0,2), (1,2)
    assert ev.beta_support(B) == {1, 3 + 2}


# baselines

def test_lasso_baseline_is_ratio_zero_pipeline():
    _, data = _small(1)
    a = ev.fit_baseline_lasso(data.X, data.U)
    b = fit_pipeline(data.X, data.U, PipelineConfig(ratio_grid=(0.0,)))
    np.testing.assert_array_equal(a.precision.beta_prime, b.precision.beta_prime)


def test_baselines_empty_at_huge_penalty():
    _, data = _small(2)
    cfg = PipelineConfig(n_lambda=1, lambda_min_ratio=1.0)
    for fit in (ev.fit_baseline_lasso, ev.fit_baseline_group_lasso):
        assert np.all(fit(data.X, data.U, cfg).precision.beta_prime == 0)


def test_group_lasso_without_covariates_is_lasso():
    rng = np.random.default_rng(3)
    Z = rng.standard_normal((40, 4))
    Z[:, 0] += 0.6 * Z[:, 1]
    prob = build_node_design(Z, np.zeros((40, 0)), 0)
    lam = 0.3 * solver.lambda_max(prob)
    a = solver.fit(prob, group_lasso_penalty(lam, 4, 0))
    b = solver.fit(prob, solver.PenaltyConfig(lam))
    np.testing.assert_allclose(a.coefficients, b.coefficients, atol=1e-12)


def test_group_lasso_matches_proximal_gradient_oracle():
    rng = np.random.default_rng(4)
    n, p, q = 12, 3, 2
    Z = rng.standard_normal((n, p))
    U = rng.random((n, q))
    prob = build_node_design(Z, U, 0)
    lam = 0.1
    res = solver.fit(prob, group_lasso_penalty(lam, p, q, solver.PenaltyConfig(0.0, tolerance=1e-12)))
    s = p - 1
    ref = proximal_gradient(prob.design, prob.response, [s] * (q + 1),
                            [lam] + [0.0] * q, [0.0] + [lam * math.sqrt(s)] * q)
    np.testing.assert_allclose(res.coefficients, ref, atol=1e-5)


# harness

def test_single_replication_has_zero_standard_error():
    cfg = sim.SimConfig(n=120, p=5, q=3, q_e=1, v_e=0.3, s_gamma=0.2, seed=5)
    report = ev.run_experiment(cfg, methods=["reggmm", "lasso"], R=1)
    rec = report.records[0]
    assert not rec["failed"]
    for m in ("reggmm", "lasso"):
        for key in ev.METRIC_NAMES:
            value = rec["methods"][m][key]
            if math.isnan(value):
                assert math.isnan(report.means[m][key])
            else:
                assert report.means[m][key] == value
                assert report.std_errors[m][key] == 0.0
    # the harness reproduces a direct fit on the same stream
    rng = sim.replication_rng(cfg.seed, 0)
    truth = sim.generate_truth(cfg, rng)
    data = sim.sample_dataset(truth, cfg.n, cfg, rng)
    direct = ev.evaluate_fit(fit_pipeline(data.X, data.U, ev.experiment_pipeline_config()), truth)
    assert direct["f1_beta"] == rec["methods"]["reggmm"]["f1_beta"]


def test_aggregation_mean_and_se():
    mean, se = ev._aggregate([1.0, 2.0, 3.0, float("nan")])
    assert mean == 2.0
    assert se == pytest.approx(1.0 / math.sqrt(3))


def test_experiment_is_reproducible_and_parallel_invariant():
    cfg = sim.SimConfig(n=100, p=4, q=2, q_e=1, v_e=0.5, s_gamma=0.25, seed=6)
    a = ev.run_experiment(cfg, methods=["reggmm"], R=3, threads=1)
    b = ev.run_experiment(cfg, methods=["reggmm"], R=3, threads=3)
    strip = lambda r: json.dumps({k: v for k, v in r.to_dict().items() if k != "wall_time"},
                                 sort_keys=True, default=str)
    assert strip(a) == strip(b)


def test_gamma_only_report_and_render():
    cfg = sim.SimConfig(n=100, p=4, q=3, q_e=1, s_gamma=0.25, seed=7)
    report = ev.run_experiment(cfg, methods=["reggmm"], R=2, gamma_only=True)
    assert set(report.means["reggmm"]) == set(ev.METRIC_NAMES[4:])
    text = report.render("table1")
    assert "TPR_Gamma" in text and "(4,3)" in text
    assert json.loads(report.to_json())["replications"] == 2


def test_failures_are_counted(monkeypatch):
    def boom(*args, **kwargs):
        raise GGRegError("synthetic")

    monkeypatch.setattr(ev, "fit_mean_model", boom)
    cfg = sim.SimConfig(n=50, p=3, q=1, q_e=0, seed=8)
    report = ev.run_experiment(cfg, methods=["lasso"], R=2)
    assert report.failures == 2
    assert math.isnan(report.means["lasso"]["f1_beta"])


def test_unknown_method_rejected():
    with pytest.raises(ValueError):
        ev.run_experiment(sim.SimConfig(n=20, p=3, q=1, q_e=0), methods=["glasso"], R=1)
    with pytest.raises(ValueError):
        ev.run_experiment(sim.SimConfig(n=20, p=3, q=1, q_e=0), R=0)
