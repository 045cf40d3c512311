"""Synthetic data from the Gaussian graphical regression model.

A ground truth consists of a scale-free population graph (``h = 0``),
Erdos-Renyi graphs for a few effective covariates, coefficients on those
edges scaled so that ``Omega(u)`` is diagonally dominant for ``u`` in
``[0, 1]^q``, and a sparse mean matrix ``Gamma``.  Every stochastic step
takes an explicit :class:`numpy.random.Generator`.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import networkx as nx
import numpy as np

from .exceptions import DegenerateRow, NotPositiveDefinite
from .graph_regression import NodeLayout, PrecisionModel, check_pd_condition, precision_at

__all__ = [
    "SimConfig",
    "GroundTruth",
    "Dataset",
    "generate_population_graph",
    "generate_covariate_graphs",
    "generate_coefficients",
    "generate_gamma",
    "generate_covariates",
    "generate_truth",
    "sample_dataset",
    "simulate",
    "replication_rng",
]

# configuration-model matchings tried before falling back to Havel-Hakimi
MAX_MATCHING_ATTEMPTS = 1000
# rejected truths redrawn before giving up
MAX_TRUTH_ATTEMPTS = 100


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class SimConfig:
    n: int = 400
    p: int = 25
    q: int = 50
    q_e: int = 5
    v_e: float = 0.01
    s_gamma: float = 0.1
    gamma_value: float = 0.5
    powerlaw_exponent: float = 2.5
    coef_low: float = 0.35
    coef_high: float = 0.5
    discrete_fraction: float = 0.5
    pd_scale: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if min(self.n, self.p) < 1 or self.q < 0:
            raise ValueError("n and p must be positive, q nonnegative")
        if not (0 <= self.q_e <= self.q):
            raise ValueError("q_e must lie in [0, q]")
        for name in ("v_e", "s_gamma", "discrete_fraction"):
            if not (0.0 <= getattr(self, name) <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1]")
        if not (0 < self.coef_low < self.coef_high):
            raise ValueError("need 0 < coef_low < coef_high")
        if not (0 < self.pd_scale <= 1):
            raise ValueError("pd_scale must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "SimConfig":
        known = {k: doc[k] for k in cls.__dataclass_fields__ if k in doc}
        return cls(**known)


@dataclass(eq=False)
class GroundTruth:
    gamma: np.ndarray
    precision: PrecisionModel
    effective_covariates: list
    population_edges: list
    covariate_edges: dict
    pd_scale: float = 1.0

    @property
    def p(self) -> int:
        return self.precision.p

    @property
    def q(self) -> int:
        return self.precision.q

    @property
    def supports(self) -> list:
        """True node supports as column indices of each node design."""
        out = []
        for j in range(self.p):
            layout = NodeLayout(self.p, self.q, j)
            row = self.precision.beta_prime[:, j, :]
            out.append(np.flatnonzero(layout.from_tensor_row(row)).tolist())
        return out

    def to_dict(self) -> dict:
        p, q = self.gamma.shape
        rows, cols = np.nonzero(self.gamma)
        return {
            "p": int(p),
            "q": int(q),
            "gamma": {
                "shape": [int(p), int(q)],
                "nonzeros": [
                    {"j": int(r), "h": int(c), "value": float(self.gamma[r, c])} for r, c in zip(rows, cols)
                ],
            },
            "precision": self.precision.to_dict(),
            "effective_covariates": [int(h) for h in self.effective_covariates],
            "population_edges": [[int(a), int(b)] for a, b in self.population_edges],
            "covariate_edges": {
                str(h): [[int(a), int(b)] for a, b in e] for h, e in sorted(self.covariate_edges.items())
            },
            "supports": self.supports,
            "pd_scale": float(self.pd_scale),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GroundTruth":
        p, q = doc["gamma"]["shape"]
        gamma = np.zeros((p, q))
        for e in doc["gamma"]["nonzeros"]:
            gamma[int(e["j"]), int(e["h"])] = float(e["value"])
        return cls(
            gamma=gamma,
            precision=PrecisionModel.from_dict(doc["precision"]),
            effective_covariates=[int(h) for h in doc.get("effective_covariates", [])],
            population_edges=[tuple(e) for e in doc.get("population_edges", [])],
            covariate_edges={int(h): [tuple(e) for e in v] for h, v in doc.get("covariate_edges", {}).items()},
            pd_scale=float(doc.get("pd_scale", 1.0)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(eq=False)
class Dataset:
    X: np.ndarray
    U: np.ndarray
    discrete_columns: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.X.shape[0]


def replication_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent generator for replication ``index`` of a seeded run."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index),)))


def _powerlaw_degrees(p, exponent, rng):
    support = np.arange(1, p)
    weights = support.astype(float) ** (-exponent)
    degrees = rng.choice(support, size=p, p=weights / weights.sum())
    if degrees.sum() % 2:
        room = np.flatnonzero(degrees < p - 1)
        if room.size:
            degrees[rng.choice(room)] += 1
        else:
            degrees[rng.integers(p)] -= 1
    return degrees


def _configuration_matching(degrees, rng):
    stubs = np.repeat(np.arange(degrees.size), degrees)
    for _ in range(MAX_MATCHING_ATTEMPTS):
        perm = rng.permutation(stubs)
        a, b = perm[0::2], perm[1::2]
        if np.any(a == b):
            continue
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        pairs = set(zip(lo.tolist(), hi.tolist()))
        if len(pairs) == lo.size:
            return sorted(pairs)
    return None


def generate_population_graph(p: int, exponent: float, rng: np.random.Generator) -> list:
    """Simple undirected graph with i.i.d. power-law degrees on ``[1, p - 1]``.

    Degrees are drawn from ``P(d) ~ d^-exponent``, made even in total by
    incrementing one node, then realized by the configuration model with
    rejection of self-loops and multi-edges.  If no simple matching is found
    after :data:`MAX_MATCHING_ATTEMPTS` tries, a Havel-Hakimi realization is
    used; non-graphical sequences are redrawn.
    """
    if p < 2:
        raise ValueError("need at least two nodes")
    if not exponent > 1:
        raise ValueError("power-law exponent must exceed 1")
    while True:
        degrees = _powerlaw_degrees(p, exponent, rng)
        if not nx.is_graphical(degrees.tolist(), method="eg"):
            continue
        edges = _configuration_matching(degrees, rng)
        if edges is None:
            g = nx.havel_hakimi_graph(degrees.tolist())
            edges = sorted((min(a, b), max(a, b)) for a, b in g.edges())
        return edges


def generate_covariate_graphs(p: int, q: int, q_e: int, v_e: float, rng: np.random.Generator):
    """Pick ``q_e`` effective covariates and an Erdos-Renyi graph for each."""
    if q_e > q:
        raise ValueError("q_e cannot exceed q")
    effective = sorted(rng.choice(q, size=q_e, replace=False).tolist()) if q_e else []
    iu, ju = np.triu_indices(p, k=1)
    graphs = {}
    for h in range(q):
        graphs[h] = []
    for h in effective:
        keep = rng.random(iu.size) < v_e
        graphs[h] = list(zip(iu[keep].tolist(), ju[keep].tolist()))
    return effective, graphs


def generate_coefficients(population_edges, covariate_edges: dict, cfg: SimConfig,
                          rng: np.random.Generator) -> PrecisionModel:
    """Coefficient tensor on the given edge pattern with a diagonally dominant ``Omega(u)``.

    One value from ``Uniform([-hi, -lo] U [lo, hi])`` is drawn per undirected
    edge and covariate slice.  Each node's row is divided by its own l1 mass,
    and the tensor is averaged with its transpose.  A node whose row mass
    still exceeds one after averaging has its entries shrunk symmetrically,
    entry ``(j, k)`` by ``max(1, mass_j, mass_k)``, and finally everything is
    multiplied by ``cfg.pd_scale``.  The result has row l1 mass at most
    ``pd_scale`` for every node, hence a positive definite ``Omega(u)`` for all
    ``u`` with entries in ``[0, 1]``.
    """
    p, q = cfg.p, cfg.q
    B = np.zeros((q + 1, p, p))
    slices = [(0, population_edges)] + [(h + 1, covariate_edges.get(h, [])) for h in range(q)]
    for h, edges in slices:
        for a, b in edges:
            mag = rng.uniform(cfg.coef_low, cfg.coef_high)
            val = mag if rng.random() < 0.5 else -mag
            B[h, a, b] = B[h, b, a] = val

    mass = np.abs(B).sum(axis=(0, 2))
    pattern = np.any(B != 0, axis=(0, 2))
    if np.any(pattern & (mass == 0)):
        raise DegenerateRow("node with edges but zero coefficient mass")
    scale = np.where(mass > 0, mass, 1.0)
    B = B / scale[None, :, None]
    B = 0.5 * (B + B.transpose(0, 2, 1))

    mass = np.abs(B).sum(axis=(0, 2))
    shrink = np.maximum(1.0, np.maximum(mass[:, None], mass[None, :]))
    B = B / shrink[None, :, :]
    B = cfg.pd_scale * B
    # exact symmetry after floating point division
    upper = np.triu(B, k=1)
    B = upper + upper.transpose(0, 2, 1)
    return PrecisionModel(np.ones(p), B, {"pd_scale": cfg.pd_scale})


def generate_gamma(p: int, q: int, s_gamma: float, value: float, rng: np.random.Generator) -> np.ndarray:
    """``p x q`` matrix with ``round(s_gamma p q)`` random entries set to ``value``."""
    if not (0.0 <= s_gamma <= 1.0):
        raise ValueError("s_gamma must lie in [0, 1]")
    count = _round_half_up(s_gamma * p * q)
    G = np.zeros(p * q)
    if count:
        G[rng.choice(p * q, size=count, replace=False)] = value
    return G.reshape(p, q)


def generate_covariates(n: int, q: int, discrete_fraction: float, rng: np.random.Generator):
    """Bernoulli(1/2) columns on a random subset, Uniform[0, 1] elsewhere.

    Returns ``(U, discrete_columns)``.
    """
    if not (0.0 <= discrete_fraction <= 1.0):
        raise ValueError("discrete_fraction must lie in [0, 1]")
    n_disc = _round_half_up(discrete_fraction * q)
    discrete = sorted(rng.choice(q, size=n_disc, replace=False).tolist()) if n_disc else []
    U = rng.random((n, q))
    if discrete:
        U[:, discrete] = rng.integers(0, 2, size=(n, len(discrete))).astype(float)
    return U, discrete


def generate_truth(cfg: SimConfig, rng: np.random.Generator) -> GroundTruth:
    """Draw graphs, coefficients and ``Gamma``; redraw if the PD check fails."""
    for _ in range(MAX_TRUTH_ATTEMPTS):
        pop = generate_population_graph(cfg.p, cfg.powerlaw_exponent, rng) if cfg.p >= 2 else []
        effective, cov = generate_covariate_graphs(cfg.p, cfg.q, cfg.q_e, cfg.v_e, rng)
        precision = generate_coefficients(pop, cov, cfg, rng)
        gamma = generate_gamma(cfg.p, cfg.q, cfg.s_gamma, cfg.gamma_value, rng)
        if np.all(check_pd_condition(precision, 1.0)):
            return GroundTruth(gamma, precision, effective, pop,
                               {h: e for h, e in cov.items() if e}, cfg.pd_scale)
    raise DegenerateRow("could not draw a ground truth satisfying the PD condition")


def sample_dataset(truth: GroundTruth, n: int, cfg: SimConfig, rng: np.random.Generator) -> Dataset:
    """Covariates plus ``x_i ~ N(Gamma u_i, Omega(u_i)^-1)`` for ``i < n``."""
    U, discrete = generate_covariates(n, truth.q, cfg.discrete_fraction, rng)
    noise = rng.standard_normal((n, truth.p))
    X = U @ truth.gamma.T
    for i in range(n):
        omega = precision_at(truth.precision, U[i])
        try:
            L = np.linalg.cholesky(omega)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite("Omega(u) is not positive definite", u=U[i].copy()) from exc
        # L L' = Omega, so L'^{-1} e has covariance Omega^{-1}
        X[i] += np.linalg.solve(L.T, noise[i])
    return Dataset(X, U, discrete)


def simulate(cfg: SimConfig, rng: Optional[np.random.Generator] = None):
    """Ground truth and one dataset of ``cfg.n`` samples."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    truth = generate_truth(cfg, rng)
    return truth, sample_dataset(truth, cfg.n, cfg, rng)
