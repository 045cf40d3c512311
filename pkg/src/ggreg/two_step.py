"""Two-step estimation with an unknown mean model.

Step 1 regresses every response on the covariates by lasso to estimate
``Gamma``; step 2 runs the node-wise sparse group lasso on the residuals
``x - Gamma u``.  With ``standardize_covariates`` the covariates are centered
and scaled (and the responses centered) before both steps, and every
reported coefficient is mapped back to the raw covariate scale.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from . import graph_regression as gr
from . import solver
from .exceptions import DimensionMismatch, GGRegError, NonFiniteInput, PipelineAbort, ZeroScale
from .graph_regression import NodeFit, NodeLayout, PrecisionModel, SymmetrizationRule
from .solver import DesignProblem, PenaltyConfig

__all__ = [
    "PipelineConfig",
    "MeanFit",
    "FittedModel",
    "METHODS",
    "estimate_gamma",
    "residualize",
    "fit_mean_model",
    "fit_pipeline",
    "back_transform",
]

METHODS = ("reggmm", "lasso", "group_lasso")


@dataclass(frozen=True)
class PipelineConfig:
    """Settings for :func:`fit_pipeline`.

    ``lambda1`` is either a fixed step-1 penalty or ``"bic"`` for a per-row
    BIC choice over the same kind of grid used for the nodes.  ``ratio_grid``
    of ``None`` means ``{0.5, 1, sqrt(p - 1)}``.
    """

    lambda1: Union[float, str] = "bic"
    method: str = "reggmm"
    n_lambda: int = gr.N_LAMBDA
    lambda_min_ratio: float = gr.LAMBDA_MIN_RATIO
    ratio_grid: Optional[tuple] = None
    rule: str = "max"
    standardize_covariates: bool = True
    max_support_fraction: float = 1.0
    tolerance: float = 1e-8
    max_iterations: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.lambda1, str):
            if self.lambda1 not in ("bic", "bic-grid"):
                raise ValueError(f"lambda1 must be a number or 'bic', got {self.lambda1!r}")
        elif not float(self.lambda1) >= 0:
            raise ValueError("lambda1 must be nonnegative")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        SymmetrizationRule(self.rule)
        if self.ratio_grid is not None:
            object.__setattr__(self, "ratio_grid", tuple(float(r) for r in self.ratio_grid))
        if not (0 < self.max_support_fraction <= 1):
            raise ValueError("max_support_fraction must lie in (0, 1]")

    @property
    def penalty(self) -> PenaltyConfig:
        return PenaltyConfig(1.0, 0.0, self.tolerance, self.max_iterations)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        return cls(**{k: doc[k] for k in cls.__dataclass_fields__ if k in doc})


@dataclass(eq=False)
class MeanFit:
    """Step-1 output: raw-scale ``Gamma`` and intercept plus the residuals."""

    gamma_hat: np.ndarray
    intercept: np.ndarray
    residuals: np.ndarray
    standardization: Optional[dict] = None
    lambdas: Optional[np.ndarray] = None


@dataclass(eq=False)
class FittedModel:
    gamma_hat: np.ndarray
    node_fits: list
    precision: PrecisionModel
    intercept: Optional[np.ndarray] = None
    standardization: Optional[dict] = None
    method: str = "reggmm"
    config: Optional[PipelineConfig] = None

    @property
    def p(self) -> int:
        return self.gamma_hat.shape[0]

    @property
    def q(self) -> int:
        return self.gamma_hat.shape[1]

    def to_dict(self) -> dict:
        nodes = []
        for f in self.node_fits:
            entry = {
                "j": f.layout.j,
                "lambda": float(f.chosen_lambda),
                "bic": float(f.bic),
                "support_size": f.support_size,
                "noise_variance": float(f.noise_variance),
                "beta": [float(v) for v in f.beta],
            }
            if self.method != "lasso":
                entry["lambda_group"] = float(f.chosen_lambda_group)
            nodes.append(entry)
        return {
            "schema_version": 1,
            "kind": "fitted_model",
            "method": self.method,
            "p": self.p,
            "q": self.q,
            "gamma": [[float(v) for v in row] for row in self.gamma_hat],
            "intercept": None if self.intercept is None else [float(v) for v in self.intercept],
            "precision": self.precision.to_dict(),
            "nodes": nodes,
            "standardization": self.standardization,
            "config": None if self.config is None else self.config.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, doc: dict) -> "FittedModel":
        """Rebuild the estimates.

        Documents without per-node ``beta`` recover it from the symmetric
        precision tensor, which loses the asymmetric node-wise values.
        """
        p, q = int(doc["p"]), int(doc["q"])
        gamma = np.asarray(doc["gamma"], dtype=float).reshape(p, q)
        precision = PrecisionModel.from_dict(doc["precision"])
        fits = []
        for entry in doc.get("nodes", []):
            j = int(entry["j"])
            layout = NodeLayout(p, q, j)
            if "beta" in entry:
                beta = np.asarray(entry["beta"], dtype=float)
            else:
                beta = layout.from_tensor_row(precision.beta_prime[:, j, :]) / precision.sigma_diag[j]
            fits.append(NodeFit(layout, beta, float(entry["noise_variance"]), float(entry["lambda"]),
                                float(entry.get("lambda_group", 0.0)), float(entry.get("bic", float("nan")))))
        intercept = doc.get("intercept")
        return cls(gamma, fits, precision,
                   None if intercept is None else np.asarray(intercept, dtype=float),
                   doc.get("standardization"), doc.get("method", "reggmm"),
                   None if doc.get("config") is None else PipelineConfig.from_dict(doc["config"]))


def _as_matrices(X, U):
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        U = U.reshape(-1, 1) if U.size else np.zeros((X.shape[0], 0))
    if X.ndim != 2 or U.ndim != 2:
        raise DimensionMismatch("X and U must be two-dimensional")
    if X.shape[0] != U.shape[0]:
        raise DimensionMismatch(f"X has {X.shape[0]} rows but U has {U.shape[0]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(U))):
        raise NonFiniteInput("X and U must be finite")
    return X, U


def estimate_gamma(X, U, lambda1: Union[float, str] = "bic", n_lambda: int = gr.N_LAMBDA,
                   lambda_min_ratio: float = gr.LAMBDA_MIN_RATIO,
                   penalty: Optional[PenaltyConfig] = None, return_lambdas: bool = False):
    """Row-wise lasso of each response on the covariates (no intercept).

    In ``"bic"`` mode each row picks its own penalty by BIC on a
    ``n_lambda``-point log grid from that row's ``lambda_max`` down to
    ``lambda_min_ratio * lambda_max``.
    """
    X, U = _as_matrices(X, U)
    n, p = X.shape
    q = U.shape[1]
    gamma = np.zeros((p, q))
    lambdas = np.zeros(p)
    if q == 0:
        return (gamma, lambdas) if return_lambdas else gamma
    base = penalty or PenaltyConfig(1.0)
    for j in range(p):
        problem = DesignProblem(U, X[:, j], (np.arange(q),), frozenset())
        if isinstance(lambda1, str):
            grid = gr.default_lambda_grid(problem, n_lambda, lambda_min_ratio)
            res, lam, _, _ = gr.bic_select(problem, grid, [0.0], base)
        else:
            lam = float(lambda1)
            res = solver.fit(problem, base.with_levels(lam, 0.0))
        gamma[j] = res.coefficients
        lambdas[j] = lam
    return (gamma, lambdas) if return_lambdas else gamma


def residualize(X, U, gamma_hat) -> np.ndarray:
    """``X - U Gamma'``, one row ``x_i - Gamma u_i`` per sample."""
    X, U = _as_matrices(X, U)
    G = np.asarray(gamma_hat, dtype=float)
    if U.shape[1] == 0:
        if G.size:
            raise DimensionMismatch("gamma_hat must be empty when there are no covariates")
        return X.copy()
    if G.shape != (X.shape[1], U.shape[1]):
        raise DimensionMismatch(f"gamma_hat must have shape {(X.shape[1], U.shape[1])}, got {G.shape}")
    return X - U @ G.T


def _standardize(U):
    means = U.mean(axis=0)
    scales = U.std(axis=0)
    bad = np.flatnonzero(scales == 0)
    if bad.size:
        raise ZeroScale(f"covariate column(s) {bad.tolist()} are constant; drop them before fitting")
    return (U - means) / scales, means, scales


def fit_mean_model(X, U, config: PipelineConfig = PipelineConfig()) -> MeanFit:
    """Step 1 plus residualization, honouring covariate standardization."""
    X, U = _as_matrices(X, U)
    q = U.shape[1]
    if config.standardize_covariates and q > 0:
        Us, means, scales = _standardize(U)
        x_mean = X.mean(axis=0)
        Xc = X - x_mean
        g_std, lams = estimate_gamma(Xc, Us, config.lambda1, config.n_lambda, config.lambda_min_ratio,
                                     config.penalty, return_lambdas=True)
        resid = residualize(Xc, Us, g_std)
        gamma = g_std / scales
        intercept = x_mean - gamma @ means
        record = {"covariate_means": means.tolist(), "covariate_scales": scales.tolist(),
                  "response_means": x_mean.tolist()}
        return MeanFit(gamma, intercept, resid, record, lams)
    gamma, lams = estimate_gamma(X, U, config.lambda1, config.n_lambda, config.lambda_min_ratio,
                                 config.penalty, return_lambdas=True)
    return MeanFit(gamma, np.zeros(X.shape[1]), residualize(X, U, gamma), None, lams)


def back_transform(beta_std, gamma_std, cov_means, cov_scales, residual_scales):
    """Map coefficients fitted on standardized covariates back to raw covariates.

    ``beta_std`` has the covariate slice on its first axis (``h = 0..q``) and
    the partner node ``k`` on its last axis; ``gamma_std`` is ``p x q``.
    Returns ``(beta_raw, gamma_raw)`` with

        raw[h] = std[h] / (sd(u_h) sd(z_k))                       h >= 1
        raw[0] = (std[0] - sum_h mean(u_h) / sd(u_h) std[h]) / sd(z_k)
    """
    beta_std = np.asarray(beta_std, dtype=float)
    means = np.asarray(cov_means, dtype=float).ravel()
    scales = np.asarray(cov_scales, dtype=float).ravel()
    rscales = np.asarray(residual_scales, dtype=float).ravel()
    q = means.size
    if beta_std.shape[0] != q + 1 or scales.size != q:
        raise DimensionMismatch("beta_std must have q + 1 slices on its first axis")
    if beta_std.shape[-1] != rscales.size:
        raise DimensionMismatch("residual_scales must match the last axis of beta_std")
    if np.any(scales <= 0) or np.any(rscales <= 0):
        raise ZeroScale("scales must be strictly positive")
    expand = (slice(None),) + (None,) * (beta_std.ndim - 1)
    per_h = beta_std[1:] / scales[expand]
    raw = np.empty_like(beta_std)
    raw[1:] = per_h / rscales
    raw[0] = (beta_std[0] - np.tensordot(means, per_h, axes=1)) / rscales
    gamma_raw = None
    if gamma_std is not None:
        gamma_raw = np.asarray(gamma_std, dtype=float) / scales[None, :] if q else np.asarray(gamma_std, float)
    return raw, gamma_raw


def _node_selector(config: PipelineConfig, Zhat, Us, p):
    family = "group" if config.method == "group_lasso" else "sparse_group"
    if config.method == "lasso":
        ratios = [0.0]
    else:
        ratios = config.ratio_grid if config.ratio_grid is not None else gr.default_ratio_grid(p)
    n = Zhat.shape[0]
    cap = max(1, int(np.floor(config.max_support_fraction * n)))

    def run(j):
        problem = gr.build_node_design(Zhat, Us, j)
        layout = NodeLayout(p, Us.shape[1], j)
        if family == "group":
            lmax = _group_lasso_lambda_max(problem, p)
        else:
            lmax = solver.lambda_max(problem)
        if lmax <= 0:
            grid = np.array([1.0])
        else:
            grid = np.geomspace(lmax, config.lambda_min_ratio * lmax, config.n_lambda)
        res, lam, lam_g, bic = gr.bic_select(problem, grid, ratios, config.penalty, family,
                                             p, Us.shape[1], cap)
        var = gr.estimate_noise_variance(problem, res.support)
        return NodeFit(layout, res.coefficients, var, lam, lam_g, bic)

    return run


def _group_lasso_lambda_max(problem: DesignProblem, p: int) -> float:
    g = problem._prepared.Xty_n
    s = p - 1
    best = float(np.max(np.abs(g[:s]))) if s else 0.0
    w = np.sqrt(p - 1)
    for start in range(s, g.size, s):
        best = max(best, float(np.linalg.norm(g[start:start + s])) / w)
    return best


def fit_pipeline(X, U, config: PipelineConfig = PipelineConfig(), threads: int = 1,
                 mean_fit: Optional[MeanFit] = None) -> FittedModel:
    """Estimate ``Gamma`` and the covariate-dependent precision model.

    ``mean_fit`` lets several node-wise methods share one step-1 result.
    Node regressions run on ``threads`` worker threads; the output does not
    depend on the thread count.
    """
    X, U = _as_matrices(X, U)
    n, p = X.shape
    q = U.shape[1]
    if n < 3 or p < 2:
        raise DimensionMismatch("need n >= 3 samples and p >= 2 responses")
    if mean_fit is None:
        mean_fit = fit_mean_model(X, U, config)
    Zhat = mean_fit.residuals
    std = mean_fit.standardization
    if std is not None:
        means = np.asarray(std["covariate_means"])
        scales = np.asarray(std["covariate_scales"])
        Us = (U - means) / scales
    else:
        Us = U

    run = _node_selector(config, Zhat, Us, p)
    try:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                std_fits = list(pool.map(run, range(p)))
        else:
            std_fits = [run(j) for j in range(p)]
    except GGRegError as exc:
        raise PipelineAbort(f"node regression failed: {exc}") from exc

    if std is not None:
        raw_fits = []
        for f in std_fits:
            row = f.layout.to_tensor_row(f.beta)
            raw_row, _ = back_transform(row, None, means, scales, np.ones(p))
            raw_fits.append(replace(f, beta=f.layout.from_tensor_row(raw_row)))
    else:
        raw_fits = std_fits
    precision = gr.assemble_precision(raw_fits, config.rule)
    return FittedModel(mean_fit.gamma_hat, raw_fits, precision, mean_fit.intercept, std,
                       config.method, config)
