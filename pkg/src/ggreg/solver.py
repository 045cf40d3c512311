"""Penalized least squares with the sparse group lasso penalty.

The objective is

    (1 / 2n) ||y - X b||^2 + lambda * sum_l w1[g(l)] |b_l|
                           + lambda_g * sum_{g penalized} w2[g] ||b_(g)||_2

with per-block weights ``w1`` (default 1) and ``w2`` (default 1 on the
penalized blocks, 0 elsewhere).  Plain lasso (``lambda_g = 0``) and group
lasso (``lambda = 0``) are special cases.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np

from . import _backend
from .exceptions import DidNotConverge, DimensionMismatch, EmptyGrid, NonFiniteInput

__all__ = [
    "DesignProblem",
    "PenaltyConfig",
    "SolverResult",
    "soft_threshold",
    "group_prox",
    "fit",
    "check_kkt",
    "lasso_path",
    "lambda_max",
    "objective",
]

# tolerance tightening applied when the objective rule fires before the KKT bound holds
_MAX_REFINEMENTS = 6


def soft_threshold(x, t):
    """Scalar (or elementwise) soft-thresholding ``sign(x) max(|x| - t, 0)``."""
    if np.ndim(x) == 0:
        x = float(x)
        if x > t:
            return x - t
        if x < -t:
            return x + t
        return 0.0
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def group_prox(v, t):
    """Block soft-thresholding, the proximal map of ``t * ||.||_2``."""
    v = np.asarray(v, dtype=float)
    nrm = float(np.sqrt(v @ v)) if v.size else 0.0
    if nrm <= t:
        return np.zeros_like(v)
    return v * (1.0 - t / nrm)


@dataclass(frozen=True, eq=False)
class DesignProblem:
    """A least-squares design with a block partition of its columns.

    Parameters
    ----------
    design : array, shape (n, d)
    response : array, shape (n,)
    groups : sequence of integer index arrays
        Disjoint blocks covering ``range(d)``.
    penalized_groups : iterable of int
        Indices into ``groups`` that carry the group penalty.
    """

    design: np.ndarray
    response: np.ndarray
    groups: tuple
    penalized_groups: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        X = np.array(self.design, dtype=float, order="F", copy=True)
        y = np.array(self.response, dtype=float, copy=True).ravel()
        if X.ndim != 2:
            raise DimensionMismatch("design must be two-dimensional")
        n, d = X.shape
        if n < 1 or d < 1:
            raise DimensionMismatch(f"design must have n >= 1 and d >= 1, got {X.shape}")
        if y.shape[0] != n:
            raise DimensionMismatch(f"response has {y.shape[0]} rows, design has {n}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise NonFiniteInput("design and response must be finite")

        groups = tuple(np.array(g, dtype=np.int64).ravel() for g in self.groups)
        seen = np.concatenate(groups) if groups else np.empty(0, dtype=np.int64)
        if seen.size != d or not np.array_equal(np.sort(seen), np.arange(d)):
            raise ValueError("groups must be disjoint and cover every column exactly once")
        penalized = frozenset(int(h) for h in self.penalized_groups)
        if any(h < 0 or h >= len(groups) for h in penalized):
            raise ValueError("penalized_groups refers to a missing block")

        X.setflags(write=False)
        y.setflags(write=False)
        for g in groups:
            g.setflags(write=False)
        object.__setattr__(self, "design", X)
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "penalized_groups", penalized)

    @classmethod
    def from_block_sizes(cls, design, response, sizes: Sequence[int], penalized=()):
        """Build a problem whose blocks are consecutive column ranges."""
        edges = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        groups = [np.arange(edges[i], edges[i + 1]) for i in range(len(sizes))]
        return cls(design, response, tuple(groups), frozenset(penalized))

    @property
    def n_samples(self) -> int:
        return self.design.shape[0]

    @property
    def n_features(self) -> int:
        return self.design.shape[1]

    @cached_property
    def _prepared(self) -> "_Prepared":
        return _Prepared(self)


class _Prepared:
    """Column-permuted copy of a problem with per-block precomputations."""

    def __init__(self, problem: DesignProblem):
        X = problem.design
        n = X.shape[0]
        self.order = np.concatenate(problem.groups)
        self.X = np.asfortranarray(X[:, self.order])
        self.y = problem.response
        sizes = np.array([g.size for g in problem.groups], dtype=np.int64)
        self.group_ptr = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.col_sq = np.einsum("ij,ij->j", self.X, self.X) / n
        self.penalized = np.array(
            [g in problem.penalized_groups for g in range(len(sizes))], dtype=bool
        )
        grams = []
        gram_ptr = [0]
        lip = np.zeros(len(sizes))
        for g in range(len(sizes)):
            if self.penalized[g]:
                Xg = self.X[:, self.group_ptr[g]:self.group_ptr[g + 1]]
                G = (Xg.T @ Xg) / n
                G = 0.5 * (G + G.T)
                lip[g] = max(float(np.linalg.eigvalsh(G)[-1]), 0.0) if G.size else 0.0
                grams.append(np.asfortranarray(G).ravel(order="F"))
                gram_ptr.append(gram_ptr[-1] + G.size)
            else:
                gram_ptr.append(gram_ptr[-1])
        self.gram_flat = np.concatenate(grams) if grams else np.zeros(0)
        self.gram_ptr = np.array(gram_ptr, dtype=np.int64)
        self.lipschitz = lip
        self.inverse = np.empty_like(self.order)
        self.inverse[self.order] = np.arange(self.order.size)
        self.Xty_n = (self.X.T @ self.y) / n
        self.sizes = sizes
        self.group_id = np.repeat(np.arange(sizes.size), sizes)

    def block_penalties(self, penalty: "PenaltyConfig"):
        G = self.group_ptr.size - 1
        w1 = np.ones(G) if penalty.l1_weights is None else np.asarray(penalty.l1_weights, float)
        w2 = np.ones(G) if penalty.group_weights is None else np.asarray(penalty.group_weights, float)
        if w1.shape != (G,) or w2.shape != (G,):
            raise DimensionMismatch(f"penalty weights must have one entry per block ({G})")
        if np.any(w1 < 0) or np.any(w2 < 0):
            raise ValueError("penalty weights must be nonnegative")
        l1 = penalty.lambda_l1 * w1
        grp = np.where(self.penalized, penalty.lambda_group * w2, 0.0)
        return l1, grp


@dataclass(frozen=True)
class PenaltyConfig:
    """Tuning levels and stopping rule for :func:`fit`.

    ``l1_weights`` and ``group_weights`` are optional per-block multipliers of
    ``lambda_l1`` and ``lambda_group``.
    """

    lambda_l1: float
    lambda_group: float = 0.0
    tolerance: float = 1e-8
    max_iterations: int = 10_000
    l1_weights: Optional[tuple] = None
    group_weights: Optional[tuple] = None
    kkt_tolerance: float = 1e-6

    def __post_init__(self):
        if not (self.lambda_l1 >= 0 and self.lambda_group >= 0):
            raise ValueError("penalty levels must be nonnegative")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if int(self.max_iterations) < 1:
            raise ValueError("max_iterations must be a positive integer")
        for name in ("l1_weights", "group_weights"):
            w = getattr(self, name)
            if w is not None:
                object.__setattr__(self, name, tuple(float(x) for x in w))

    def with_levels(self, lambda_l1: float, lambda_group: float) -> "PenaltyConfig":
        return PenaltyConfig(
            lambda_l1, lambda_group, self.tolerance, self.max_iterations,
            self.l1_weights, self.group_weights, self.kkt_tolerance,
        )


@dataclass(frozen=True, eq=False)
class SolverResult:
    coefficients: np.ndarray
    objective_value: float
    iterations: int
    converged: bool
    kkt_residual: float
    objective_history: np.ndarray = field(repr=False, default=None)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.coefficients)


def _block_norms(prep: _Prepared, beta):
    sq = np.bincount(prep.group_id, weights=beta * beta, minlength=prep.sizes.size)
    return np.sqrt(sq)


def _penalty_value(prep: _Prepared, beta, l1, grp):
    return float(l1[prep.group_id] @ np.abs(beta) + grp @ _block_norms(prep, beta))


def _kkt_permuted(prep: _Prepared, beta, resid, l1, grp) -> float:
    n = prep.X.shape[0]
    grad = (prep.X.T @ resid) / n
    gid = prep.group_id
    norms = _block_norms(prep, beta)
    l1c = l1[gid]
    active = beta != 0.0
    worst = 0.0
    if np.any(active):
        a_gid = gid[active]
        b = beta[active]
        sub = l1c[active] * np.sign(b) + grp[a_gid] * b / np.where(norms[a_gid] > 0, norms[a_gid], 1.0)
        worst = float(np.max(np.abs(grad[active] - sub)))
    # zero coordinates outside all-zero penalized blocks: |g_l| <= lambda
    zero_block = (grp > 0.0) & (norms == 0.0)
    coord = ~active & ~zero_block[gid]
    if np.any(coord):
        worst = max(worst, float(np.max(np.abs(grad[coord]) - l1c[coord])))
    # all-zero penalized blocks: ||S(g_(h), lambda)||_2 <= lambda_g
    if np.any(zero_block):
        shrunk = np.maximum(np.abs(grad) - l1c, 0.0)
        mass = np.sqrt(np.bincount(gid, weights=shrunk * shrunk, minlength=grp.size))
        worst = max(worst, float(np.max(mass[zero_block] - grp[zero_block])))
    return max(worst, 0.0)


def check_kkt(problem: DesignProblem, penalty: PenaltyConfig, beta) -> float:
    """Largest violation of the stationarity conditions at ``beta``.

    With ``g = X'(y - X beta) / n``, active coordinates must satisfy
    ``g_l = lambda sign(b_l) [+ lambda_g b_l / ||b_(h)||]``, zero coordinates
    ``|g_l| <= lambda`` and zero penalized blocks
    ``||S(g_(h), lambda)||_2 <= lambda_g``.
    """
    prep = problem._prepared
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (problem.n_features,):
        raise DimensionMismatch(f"beta must have length {problem.n_features}")
    bp = beta[prep.order]
    resid = prep.y - prep.X @ bp
    l1, grp = prep.block_penalties(penalty)
    return _kkt_permuted(prep, bp, resid, l1, grp)


def objective(problem: DesignProblem, penalty: PenaltyConfig, beta) -> float:
    prep = problem._prepared
    bp = np.asarray(beta, dtype=float)[prep.order]
    resid = prep.y - prep.X @ bp
    l1, grp = prep.block_penalties(penalty)
    return 0.5 * float(resid @ resid) / problem.n_samples + _penalty_value(prep, bp, l1, grp)


def lambda_max(problem: DesignProblem) -> float:
    """Smallest ``lambda`` at which the all-zero vector solves the lasso."""
    return float(np.max(np.abs(problem._prepared.Xty_n)))


def fit(problem: DesignProblem, penalty: PenaltyConfig, warm_start=None) -> SolverResult:
    """Minimize the sparse group lasso objective by blockwise coordinate descent.

    The objective-change rule is backed by a KKT certificate: if the rule
    stops the iteration while the stationarity residual still exceeds
    ``penalty.kkt_tolerance``, the tolerance is tightened and the descent
    resumes from the current point.  A :class:`DidNotConverge` warning is
    emitted when ``max_iterations`` sweeps are exhausted.
    """
    prep = problem._prepared
    d = problem.n_features
    if warm_start is None:
        beta = np.zeros(d)
    else:
        warm = np.asarray(warm_start, dtype=float)
        if warm.shape != (d,):
            raise DimensionMismatch(f"warm_start must have length {d}")
        if not np.all(np.isfinite(warm)):
            raise NonFiniteInput("warm_start must be finite")
        beta = warm[prep.order].copy()
    beta[prep.col_sq == 0.0] = 0.0
    l1, grp = prep.block_penalties(penalty)

    if not np.any(beta):
        # zero is certified by the same gradient that defines lambda_max, so
        # penalties at or above it return exact zeros despite kernel rounding
        resid = prep.y.copy()
        if _kkt_permuted(prep, beta, resid, l1, grp) == 0.0:
            obj = 0.5 * float(resid @ resid) / problem.n_samples
            return SolverResult(np.zeros(d), obj, 0, True, 0.0, np.array([obj]))

    max_iter = int(penalty.max_iterations)
    tol = float(penalty.tolerance)
    history = []
    used = 0
    converged = False
    kkt = np.inf
    for _ in range(_MAX_REFINEMENTS + 1):
        resid = prep.y - prep.X @ beta
        buf = np.empty(max_iter - used + 1)
        it, rule_met = _backend.solve(
            prep.X, beta, resid, prep.group_ptr, l1, grp, prep.col_sq,
            prep.lipschitz, prep.gram_flat, prep.gram_ptr, tol, max_iter - used, buf,
        )
        history.append(buf[: it + 1] if not history else buf[1: it + 1])
        used += it
        resid = prep.y - prep.X @ beta
        kkt = _kkt_permuted(prep, beta, resid, l1, grp)
        if rule_met and kkt <= penalty.kkt_tolerance:
            converged = True
            break
        if used >= max_iter:
            break
        tol = max(tol * 1e-2, 1e-16)

    if not converged:
        warnings.warn(
            f"solver stopped after {used} sweeps with KKT residual {kkt:.3e}",
            DidNotConverge,
            stacklevel=2,
        )
    hist = np.concatenate(history)
    coef = beta[prep.inverse]
    obj = 0.5 * float(resid @ resid) / problem.n_samples + _penalty_value(prep, beta, l1, grp)
    return SolverResult(coef, obj, used, converged, kkt, hist)


def lasso_path(
    problem: DesignProblem,
    lambdas: Iterable[float],
    penalty: Optional[PenaltyConfig] = None,
    group_ratio: Optional[float] = None,
) -> list:
    """Warm-started fits along a strictly descending ``lambda`` grid.

    ``penalty`` supplies the group level, weights and stopping rule; its
    ``lambda_l1`` is replaced by each grid value.  With ``group_ratio`` the
    group level follows the grid as ``group_ratio * lambda``.
    """
    lambdas = [float(v) for v in lambdas]
    if not lambdas:
        raise EmptyGrid("lambda grid is empty")
    if any(v <= 0 for v in lambdas):
        raise ValueError("lambda grid must be strictly positive")
    if any(b >= a for a, b in zip(lambdas, lambdas[1:])):
        raise ValueError("lambda grid must be strictly descending")
    if penalty is None:
        penalty = PenaltyConfig(lambdas[0])
    results = []
    warm = None
    for lam in lambdas:
        lam_g = penalty.lambda_group if group_ratio is None else group_ratio * lam
        res = fit(problem, penalty.with_levels(lam, lam_g), warm_start=warm)
        results.append(res)
        warm = res.coefficients
    return results
