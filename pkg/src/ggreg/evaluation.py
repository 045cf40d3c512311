"""Selection metrics, estimation errors and the Monte Carlo harness."""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import simulation as sim
from .exceptions import DimensionMismatch, GGRegError
from .graph_regression import PrecisionModel
from .two_step import METHODS, FittedModel, PipelineConfig, fit_mean_model, fit_pipeline

__all__ = [
    "SelectionMetrics",
    "ReplicationReport",
    "selection_metrics",
    "gamma_support",
    "beta_support",
    "beta_l2_sum",
    "estimation_errors",
    "fit_baseline_lasso",
    "fit_baseline_group_lasso",
    "evaluate_fit",
    "run_experiment",
    "experiment_pipeline_config",
]

METRIC_NAMES = (
    "tpr_beta", "fpr_beta", "f1_beta", "error_beta",
    "tpr_gamma", "fpr_gamma", "f1_gamma", "error_gamma",
)


@dataclass(frozen=True)
class SelectionMetrics:
    tp: int
    fp: int
    fn: int
    tn: int
    tpr: float
    fpr: float
    f1: float


def selection_metrics(estimated_support, true_support, universe_size: int) -> SelectionMetrics:
    """Confusion counts and rates of an estimated support.

    Undefined rates are NaN, except that an empty estimate of an empty truth
    has ``tpr = 1``.
    """
    est = {int(i) for i in estimated_support}
    true = {int(i) for i in true_support}
    if any(i < 0 or i >= universe_size for i in est | true):
        raise ValueError("support indices must lie in [0, universe_size)")
    tp = len(est & true)
    fp = len(est - true)
    fn = len(true - est)
    tn = universe_size - tp - fp - fn
    if tp + fn:
        tpr = tp / (tp + fn)
    else:
        tpr = 1.0 if not est else math.nan
    fpr = fp / (fp + tn) if fp + tn else math.nan
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else math.nan
    return SelectionMetrics(tp, fp, fn, tn, tpr, fpr, f1)


def gamma_support(gamma) -> set:
    return set(np.flatnonzero(np.asarray(gamma).ravel()).tolist())


def beta_support(beta_prime) -> set:
    """Linear indices ``h * C(p, 2) + m`` of nonzero ``(j < k, h)`` triples."""
    B = np.asarray(beta_prime)
    p = B.shape[1]
    iu, ju = np.triu_indices(p, k=1)
    flat = B[:, iu, ju] != 0
    return set(np.flatnonzero(flat.ravel()).tolist())


def beta_l2_sum(estimated, truth) -> float:
    """``sum_j ||b_hat_j - b_j||_2`` for ``(q + 1, p, p)`` tensors indexed ``[h, j, k]``."""
    E = np.asarray(estimated, dtype=float)
    T = np.asarray(truth, dtype=float)
    if E.shape != T.shape:
        raise DimensionMismatch(f"coefficient tensors differ in shape: {E.shape} vs {T.shape}")
    diff = E - T
    return float(np.sqrt((diff ** 2).sum(axis=(0, 2))).sum())


def estimation_errors(fitted: FittedModel, truth: sim.GroundTruth) -> tuple:
    """``(||Gamma_hat - Gamma||_F, sum_j ||beta'_hat_j - beta'_j||_2)``."""
    if fitted.gamma_hat.shape != truth.gamma.shape:
        raise DimensionMismatch("Gamma estimate and truth differ in shape")
    g_err = float(np.linalg.norm(fitted.gamma_hat - truth.gamma))
    return g_err, beta_l2_sum(fitted.precision.beta_prime, truth.precision.beta_prime)


def fit_baseline_lasso(X, U, config: PipelineConfig = PipelineConfig(), **kwargs) -> FittedModel:
    """Node-wise lasso: the two-step pipeline with the group penalty switched off."""
    return fit_pipeline(X, U, replace(config, method="lasso"), **kwargs)


def fit_baseline_group_lasso(X, U, config: PipelineConfig = PipelineConfig(), **kwargs) -> FittedModel:
    """Node-wise group lasso with singleton groups on block 0 and sqrt(p - 1) weights elsewhere."""
    return fit_pipeline(X, U, replace(config, method="group_lasso"), **kwargs)


def evaluate_fit(fitted: FittedModel, truth: sim.GroundTruth) -> dict:
    """All selection and estimation criteria of one fit as a flat dict."""
    p, q = truth.gamma.shape
    if fitted.gamma_hat.shape != (p, q) or fitted.precision.p != p or fitted.precision.q != q:
        raise DimensionMismatch("fitted model and ground truth have different dimensions")
    g_err, b_err = estimation_errors(fitted, truth)
    gm = selection_metrics(gamma_support(fitted.gamma_hat), gamma_support(truth.gamma), p * q)
    bm = selection_metrics(beta_support(fitted.precision.beta_prime),
                           beta_support(truth.precision.beta_prime), p * (p - 1) // 2 * (q + 1))
    return {
        "tpr_beta": bm.tpr, "fpr_beta": bm.fpr, "f1_beta": bm.f1, "error_beta": b_err,
        "tpr_gamma": gm.tpr, "fpr_gamma": gm.fpr, "f1_gamma": gm.f1, "error_gamma": g_err,
        "counts_beta": asdict(bm), "counts_gamma": asdict(gm),
    }


def experiment_pipeline_config(**overrides) -> PipelineConfig:
    """Pipeline settings used by :func:`run_experiment` unless overridden."""
    base = dict(standardize_covariates=False, max_support_fraction=0.25)
    base.update(overrides)
    return PipelineConfig(**base)


@dataclass
class ReplicationReport:
    """Per-method mean and standard error of every criterion over ``R`` runs."""

    config: dict
    methods: list
    replications: int
    means: dict
    std_errors: dict
    failures: int = 0
    records: list = field(default_factory=list)
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, default=_json_default)

    def render(self, table: str = "table2") -> str:
        """Aligned plain-text table, ``mean (SE)`` per cell."""
        if table == "table1":
            cols = [("TPR_Gamma", "tpr_gamma"), ("FPR_Gamma", "fpr_gamma"),
                    ("F1", "f1_gamma"), ("Error of Gamma", "error_gamma")]
            methods = self.methods[:1]
        else:
            cols = [("TPR_beta", "tpr_beta"), ("FPR_beta", "fpr_beta"),
                    ("F1", "f1_beta"), ("Error of beta", "error_beta")]
            methods = self.methods
        header = ["n", "(p, q)", "Method"] + [c[0] for c in cols]
        cfg = self.config
        rows = []
        for m in methods:
            cells = [str(cfg["n"]), f"({cfg['p']},{cfg['q']})", m]
            for _, key in cols:
                digits = 4 if key.startswith("fpr_beta") else 3
                cells.append(f"{self.means[m][key]:.{digits}f} ({self.std_errors[m][key]:.{digits}f})")
            rows.append(cells)
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        line = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths))
        out = [line(header), "  ".join("-" * w for w in widths)] + [line(r) for r in rows]
        out.append(f"R = {self.replications}, failures = {self.failures}")
        return "\n".join(out)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj)}")


def _one_replication(args):
    cfg, methods, index, pipeline, gamma_only = args
    rng = sim.replication_rng(cfg.seed, index)
    record = {"replication": index, "failed": False, "methods": {}}
    try:
        truth = sim.generate_truth(cfg, rng)
        data = sim.sample_dataset(truth, cfg.n, cfg, rng)
        mean_fit = fit_mean_model(data.X, data.U, pipeline)
        if gamma_only:
            gm = selection_metrics(gamma_support(mean_fit.gamma_hat), gamma_support(truth.gamma), cfg.p * cfg.q)
            g_err = float(np.linalg.norm(mean_fit.gamma_hat - truth.gamma))
            stats = {"tpr_gamma": gm.tpr, "fpr_gamma": gm.fpr, "f1_gamma": gm.f1, "error_gamma": g_err}
            for m in methods:
                record["methods"][m] = dict(stats)
            return record
        for m in methods:
            fitted = fit_pipeline(data.X, data.U, replace(pipeline, method=m), mean_fit=mean_fit)
            record["methods"][m] = evaluate_fit(fitted, truth)
    except (GGRegError, np.linalg.LinAlgError) as exc:
        record["failed"] = True
        record["error"] = f"{type(exc).__name__}: {exc}"
    return record


def _aggregate(values):
    arr = np.array([v for v in values if not (v is None or math.isnan(v))], dtype=float)
    if arr.size == 0:
        return math.nan, math.nan
    se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
    return float(arr.mean()), se


def run_experiment(cfg: sim.SimConfig, methods: Sequence[str] = METHODS, R: int = 50,
                   pipeline: Optional[PipelineConfig] = None, threads: int = 1,
                   gamma_only: bool = False, progress=None) -> ReplicationReport:
    """Simulate ``R`` independent datasets and fit every method on each.

    Replication ``r`` draws from :func:`simulation.replication_rng` of
    ``(cfg.seed, r)``, so results do not depend on ``threads``.  With
    ``gamma_only`` only the step-1 criteria are computed.
    """
    if R < 1:
        raise ValueError("need at least one replication")
    methods = list(methods)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    pipeline = pipeline or experiment_pipeline_config()
    jobs = [(cfg, methods, r, pipeline, gamma_only) for r in range(R)]
    start = time.perf_counter()
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_one_replication, jobs))
    else:
        records = []
        for job in jobs:
            records.append(_one_replication(job))
            if progress is not None:
                progress(records[-1])
    records.sort(key=lambda rec: rec["replication"])
    ok = [rec for rec in records if not rec["failed"]]
    names = METRIC_NAMES[4:] if gamma_only else METRIC_NAMES
    means, ses = {}, {}
    for m in methods:
        means[m], ses[m] = {}, {}
        for key in names:
            means[m][key], ses[m][key] = _aggregate([rec["methods"][m][key] for rec in ok])
    return ReplicationReport(
        config=cfg.to_dict(), methods=methods, replications=R, means=means, std_errors=ses,
        failures=len(records) - len(ok), records=records, wall_time=time.perf_counter() - start,
    )
