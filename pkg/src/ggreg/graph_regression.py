"""Node-wise Gaussian graphical regression.

Node ``j`` is regressed on the other nodes and on their interactions with
the covariates.  Columns of the node design are laid out group-major: block
``h = 0`` holds ``z_k`` for every ``k != j`` (in increasing ``k``), block
``h >= 1`` holds ``u_h * z_k``.  Blocks ``1..q`` carry the group penalty,
block 0 only the elementwise one.

Coefficient tensors are stored densely with shape ``(q + 1, p, p)`` where
``B[h, j, k]`` is the coefficient of ``z_k`` (``h = 0``) or ``u_h z_k`` in
the regression of node ``j``; diagonals are zero.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from . import solver
from .exceptions import (
    AllFitsDegenerate,
    DimensionMismatch,
    InvalidSparsity,
    NonFiniteInput,
    SupportTooLarge,
)
from .solver import DesignProblem, PenaltyConfig

__all__ = [
    "NodeLayout",
    "NodeFit",
    "PrecisionModel",
    "SymmetrizationRule",
    "build_node_design",
    "fit_node",
    "select_tuning_bic",
    "default_lambda_grid",
    "default_ratio_grid",
    "group_lasso_penalty",
    "estimate_noise_variance",
    "symmetrize",
    "assemble_precision",
    "precision_at",
    "check_pd_condition",
    "theoretical_penalties",
]

N_LAMBDA = 30
LAMBDA_MIN_RATIO = 0.01


class SymmetrizationRule(str, Enum):
    MAX = "max"
    MIN = "min"


@dataclass(frozen=True)
class NodeLayout:
    """Column bookkeeping for the design of node ``j``."""

    p: int
    q: int
    j: int

    def __post_init__(self):
        if not (0 <= self.j < self.p):
            raise ValueError(f"node index {self.j} outside [0, {self.p})")

    @property
    def neighbors(self) -> np.ndarray:
        return np.delete(np.arange(self.p), self.j)

    @property
    def n_columns(self) -> int:
        return (self.p - 1) * (self.q + 1)

    def column(self, k: int, h: int) -> int:
        if k == self.j:
            raise ValueError("a node is not regressed on itself")
        m = k if k < self.j else k - 1
        return h * (self.p - 1) + m

    def pair(self, col: int) -> tuple:
        h, m = divmod(int(col), self.p - 1)
        k = m if m < self.j else m + 1
        return k, h

    @property
    def column_map(self) -> list:
        return [self.pair(c) for c in range(self.n_columns)]

    def groups(self) -> tuple:
        s = self.p - 1
        return tuple(np.arange(h * s, (h + 1) * s) for h in range(self.q + 1))

    def to_tensor_row(self, beta) -> np.ndarray:
        """Reshape a node coefficient vector into ``(q + 1, p)`` with a zero at ``j``."""
        out = np.zeros((self.q + 1, self.p))
        out[:, self.neighbors] = np.asarray(beta).reshape(self.q + 1, self.p - 1)
        return out

    def from_tensor_row(self, row) -> np.ndarray:
        return np.asarray(row)[:, self.neighbors].ravel()


@dataclass(eq=False)
class NodeFit:
    layout: NodeLayout
    beta: np.ndarray
    noise_variance: float
    chosen_lambda: float
    chosen_lambda_group: float
    bic: float = float("nan")

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.beta)

    @property
    def support_size(self) -> int:
        return int(np.count_nonzero(self.beta))

    @property
    def group_support(self) -> list:
        blocks = self.beta.reshape(self.layout.q + 1, self.layout.p - 1)
        return [h for h in range(1, self.layout.q + 1) if np.any(blocks[h] != 0)]


@dataclass(eq=False)
class PrecisionModel:
    """Covariate-dependent precision ``Omega(u)`` via its coefficient tensor.

    ``beta_prime[h, j, k]`` is symmetric in ``(j, k)`` with zero diagonal.
    """

    sigma_diag: np.ndarray
    beta_prime: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sigma_diag = np.asarray(self.sigma_diag, dtype=float)
        self.beta_prime = np.asarray(self.beta_prime, dtype=float)
        p = self.sigma_diag.shape[0]
        if self.beta_prime.ndim != 3 or self.beta_prime.shape[1:] != (p, p):
            raise DimensionMismatch("beta_prime must have shape (q + 1, p, p)")
        if np.any(self.sigma_diag <= 0):
            raise ValueError("diagonal precision entries must be positive")
        if not np.array_equal(self.beta_prime, self.beta_prime.transpose(0, 2, 1)):
            raise ValueError("beta_prime must be symmetric in (j, k)")

    @property
    def p(self) -> int:
        return self.sigma_diag.shape[0]

    @property
    def q(self) -> int:
        return self.beta_prime.shape[0] - 1

    def edges(self) -> list:
        """Nonzero ``(j, k, h, value)`` with ``j < k``, in lexicographic order."""
        h_idx, j_idx, k_idx = np.nonzero(np.triu(self.beta_prime, k=1))
        order = np.lexsort((h_idx, k_idx, j_idx))
        return [
            (int(j_idx[i]), int(k_idx[i]), int(h_idx[i]), float(self.beta_prime[h_idx[i], j_idx[i], k_idx[i]]))
            for i in order
        ]

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "q": self.q,
            "sigma_diag": [float(v) for v in self.sigma_diag],
            "edges": [{"j": j, "k": k, "h": h, "value": v} for j, k, h, v in self.edges()],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PrecisionModel":
        p, q = int(doc["p"]), int(doc["q"])
        B = np.zeros((q + 1, p, p))
        for e in doc["edges"]:
            j, k, h = int(e["j"]), int(e["k"]), int(e["h"])
            if j == k or not (0 <= h <= q):
                raise ValueError(f"invalid edge entry {e}")
            B[h, j, k] = B[h, k, j] = float(e["value"])
        return cls(np.asarray(doc["sigma_diag"], dtype=float), B)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _check_inputs(Z, U):
    Z = np.asarray(Z, dtype=float)
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        U = U.reshape(-1, 1) if U.size else np.zeros((Z.shape[0], 0))
    if Z.ndim != 2 or U.ndim != 2:
        raise DimensionMismatch("Z and U must be two-dimensional")
    if Z.shape[0] != U.shape[0]:
        raise DimensionMismatch(f"Z has {Z.shape[0]} rows but U has {U.shape[0]}")
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(U))):
        raise NonFiniteInput("Z and U must be finite")
    return Z, U


def build_node_design(Z, U, j: int) -> DesignProblem:
    """Interaction design for regressing node ``j`` on the rest."""
    Z, U = _check_inputs(Z, U)
    n, p = Z.shape
    q = U.shape[1]
    layout = NodeLayout(p, q, j)
    Zm = Z[:, layout.neighbors]
    W = np.empty((n, layout.n_columns), order="F")
    s = p - 1
    W[:, :s] = Zm
    for h in range(q):
        W[:, (h + 1) * s:(h + 2) * s] = U[:, h:h + 1] * Zm
    return DesignProblem(W, Z[:, j], layout.groups(), frozenset(range(1, q + 1)))


def group_lasso_penalty(lambda_group: float, p: int, q: int, base: Optional[PenaltyConfig] = None) -> PenaltyConfig:
    """``lambda_g (||b_(0)||_1 + sqrt(p - 1) sum_h ||b_(h)||_2)`` as a :class:`PenaltyConfig`."""
    base = base or PenaltyConfig(0.0)
    l1_w = (1.0,) + (0.0,) * q
    return PenaltyConfig(
        lambda_group, lambda_group * math.sqrt(p - 1), base.tolerance, base.max_iterations,
        l1_w, None, base.kkt_tolerance,
    )


def estimate_noise_variance(problem: DesignProblem, support) -> float:
    """Residual variance after projecting the response on the support columns.

    ``||y - P_S y||^2 / (n - |S|)``; the projection uses pivoted QR with a
    relative rank cutoff of ``1e-10`` so collinear columns are tolerated.
    """
    support = np.asarray(sorted(int(s) for s in support), dtype=np.int64)
    n = problem.n_samples
    if support.size >= n:
        raise SupportTooLarge(f"support of size {support.size} needs more than n = {n} samples")
    y = problem.response
    if support.size == 0:
        r = y
    else:
        Xs = problem.design[:, support]
        Q, R, _ = scipy.linalg.qr(Xs, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        rank = int(np.sum(diag > 1e-10 * diag[0])) if diag.size and diag[0] > 0 else 0
        Qr = Q[:, :rank]
        r = y - Qr @ (Qr.T @ y)
    return float(r @ r) / (n - support.size)


def _node_fit(problem, layout, result, lam, lam_g, bic=float("nan")):
    support = result.support
    var = estimate_noise_variance(problem, support)
    return NodeFit(layout, result.coefficients, var, lam, lam_g, bic)


def fit_node(Z, U, j: int, penalty: PenaltyConfig) -> NodeFit:
    """Sparse group lasso fit of node ``j`` at fixed penalty levels."""
    problem = build_node_design(Z, U, j)
    Z, U = _check_inputs(Z, U)
    layout = NodeLayout(Z.shape[1], U.shape[1], j)
    res = solver.fit(problem, penalty)
    return _node_fit(problem, layout, res, penalty.lambda_l1, penalty.lambda_group)


def default_lambda_grid(problem: DesignProblem, n_lambda: int = N_LAMBDA,
                        min_ratio: float = LAMBDA_MIN_RATIO) -> np.ndarray:
    lam_max = solver.lambda_max(problem)
    if lam_max <= 0:
        return np.array([1.0])
    return np.geomspace(lam_max, min_ratio * lam_max, n_lambda)


def default_ratio_grid(p: int) -> list:
    return [0.5, 1.0, math.sqrt(p - 1)]


def bic_value(n: int, loss: float, support_size: int) -> float:
    """``n log(loss) + s log(n)`` with the natural logarithm."""
    return n * math.log(loss) + support_size * math.log(n)


def _loss(problem: DesignProblem, beta) -> float:
    r = problem.response - problem.design @ beta
    return 0.5 * float(r @ r) / problem.n_samples


def bic_select(problem: DesignProblem, lambda_grid, ratio_grid, penalty: Optional[PenaltyConfig] = None,
               family: str = "sparse_group", p: Optional[int] = None, q: Optional[int] = None,
               max_support: Optional[int] = None):
    """Fit every grid point and return ``(result, lambda, lambda_g, bic)`` of the BIC minimizer.

    ``family`` is ``"sparse_group"`` (``lambda_g = ratio * lambda``) or
    ``"group"`` (the group lasso penalty of :func:`group_lasso_penalty`, with
    ``lambda_grid`` indexing ``lambda_g`` and ``ratio_grid`` ignored).
    Candidates with ``support >= max_support`` (default ``n``) or zero loss
    are inadmissible; along each path, fits stop at the first such candidate.
    Ties go to the larger ``lambda``, then the larger ratio.
    """
    base = penalty or PenaltyConfig(1.0)
    n = problem.n_samples
    cap = n if max_support is None else min(int(max_support), n)
    lambdas = sorted({float(v) for v in lambda_grid}, reverse=True)
    if not lambdas:
        raise ValueError("lambda grid is empty")
    if family == "group":
        ratios = [None]
    else:
        ratios = sorted({float(r) for r in ratio_grid}, reverse=True)
        if not ratios:
            raise ValueError("ratio grid is empty")

    best = None
    best_key = None
    for ratio in ratios:
        warm = None
        for lam in lambdas:
            if family == "group":
                pen = group_lasso_penalty(lam, p, q, base)
                lam_l1, lam_g = lam, lam
            else:
                lam_l1, lam_g = lam, ratio * lam
                pen = base.with_levels(lam_l1, lam_g)
            res = solver.fit(problem, pen, warm_start=warm)
            warm = res.coefficients
            s = int(np.count_nonzero(res.coefficients))
            loss = _loss(problem, res.coefficients)
            if s >= cap or loss <= 0.0:
                break
            bic = bic_value(n, loss, s)
            # smaller bic wins; ties prefer larger lambda then larger ratio
            key = (bic, -lam, -(ratio if ratio is not None else 0.0))
            if best_key is None or key < best_key:
                best_key = key
                best = (res, lam_l1, lam_g, bic)
    if best is None:
        raise AllFitsDegenerate("every candidate fit interpolates the response")
    return best


def select_tuning_bic(Z, U, j: int, lambda_grid=None, ratio_grid=None,
                      penalty: Optional[PenaltyConfig] = None, family: str = "sparse_group",
                      max_support: Optional[int] = None) -> NodeFit:
    """BIC choice of ``(lambda, lambda_g = ratio * lambda)`` for node ``j``.

    Defaults: 30 log-spaced ``lambda`` from ``lambda_max`` down to
    ``0.01 lambda_max`` and ratios ``{0.5, 1, sqrt(p - 1)}``.  A ratio grid of
    ``[0]`` gives the plain lasso.
    """
    Z, U = _check_inputs(Z, U)
    p, q = Z.shape[1], U.shape[1]
    problem = build_node_design(Z, U, j)
    layout = NodeLayout(p, q, j)
    if lambda_grid is None:
        lambda_grid = default_lambda_grid(problem)
    if ratio_grid is None:
        ratio_grid = default_ratio_grid(p)
    res, lam, lam_g, bic = bic_select(problem, lambda_grid, ratio_grid, penalty, family, p, q, max_support)
    return _node_fit(problem, layout, res, lam, lam_g, bic)


def symmetrize(coef, rule=SymmetrizationRule.MAX) -> np.ndarray:
    """Symmetrize an asymmetric ``(q + 1, p, p)`` tensor entrywise.

    MAX keeps whichever of ``B[h, j, k]`` and ``B[h, k, j]`` has the larger
    magnitude, MIN the smaller.  Equal magnitudes keep the entry estimated
    in the regression of the smaller node index.
    """
    rule = SymmetrizationRule(rule)
    B = np.asarray(coef, dtype=float)
    lower_first = B  # B[h, j, k] with j the regressed node
    other = B.transpose(0, 2, 1)
    a, b = np.abs(lower_first), np.abs(other)
    if rule is SymmetrizationRule.MAX:
        take_other = b > a
    else:
        take_other = b < a
    out = np.where(take_other, other, lower_first)
    # resolve the upper triangle (j < k: node j is the smaller index) and mirror it
    upper = np.triu(out, k=1)
    return upper + upper.transpose(0, 2, 1)


def assemble_precision(node_fits: Sequence[NodeFit], rule=SymmetrizationRule.MAX) -> PrecisionModel:
    """Rescale node coefficients by ``1 / noise_variance`` and symmetrize."""
    if not node_fits:
        raise ValueError("need one NodeFit per node")
    layout0 = node_fits[0].layout
    p, q = layout0.p, layout0.q
    if len(node_fits) != p:
        raise DimensionMismatch(f"expected {p} node fits, got {len(node_fits)}")
    B0 = np.zeros((q + 1, p, p))
    sigma = np.empty(p)
    for fit_ in node_fits:
        j = fit_.layout.j
        if not fit_.noise_variance > 0:
            raise ValueError(f"node {j} has a nonpositive noise variance")
        sigma[j] = 1.0 / fit_.noise_variance
        B0[:, j, :] = sigma[j] * fit_.layout.to_tensor_row(fit_.beta)
    return PrecisionModel(sigma, symmetrize(B0, rule))


def precision_at(model: PrecisionModel, u) -> np.ndarray:
    """Dense ``Omega(u)``: ``sigma^{jj}`` on the diagonal, ``-omega_jk(u)`` off it."""
    u = np.asarray(u, dtype=float).ravel()
    if u.shape[0] != model.q:
        raise DimensionMismatch(f"u must have length {model.q}")
    weights = np.concatenate([[1.0], u])
    off = np.tensordot(weights, model.beta_prime, axes=1)
    upper = np.triu(off, k=1)
    omega = -(upper + upper.T)
    omega[np.diag_indices(model.p)] = model.sigma_diag
    return omega


def check_pd_condition(model: PrecisionModel, u_bound: float) -> np.ndarray:
    """Per-node diagonal-dominance test ``M1 ||beta'_k||_1 <= sigma^{kk}``.

    Passing on every node makes ``Omega(u)`` positive semidefinite for all
    ``||u||_inf <= M1`` provided ``M1 >= 1``, since the ``h = 0`` slice enters
    with weight one.
    """
    if not u_bound > 0:
        raise ValueError("u_bound must be positive")
    mass = np.abs(model.beta_prime).sum(axis=(0, 1))
    return u_bound * mass <= model.sigma_diag


def theoretical_penalties(n: int, p: int, q: int, s_j: int, s_jg: int, sigma_eps: float,
                          constant: float = 1.0) -> tuple:
    """Rate-driven ``(lambda, lambda_g)`` with ``lambda_g = sqrt(s_j / s_jg) lambda``."""
    if s_jg < 1 or s_jg > s_j:
        raise InvalidSparsity(f"need 1 <= s_jg <= s_j, got s_j={s_j}, s_jg={s_jg}")
    if min(n, p, q) < 1:
        raise ValueError("n, p and q must be positive")
    lam = constant * sigma_eps * math.sqrt(
        math.log(math.e * p) / n + s_jg * math.log(math.e * q / s_jg) / (n * s_j)
    )
    return lam, math.sqrt(s_j / s_jg) * lam
