"""Baseline robust estimators wrapped around the least-squares solver.

Dynamic covariance scaling reweights whitened residuals; Max-Mixtures swaps
each measurement's noise model for its most likely mixture component.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NegativeInput
from .model import FactorGraph, NoiseModel, StateTrajectory, residual, whitened_residual
from .solver import SolveReport, SolverConfig, solve

log = logging.getLogger(__name__)


@dataclass
class DcsConfig:
    phi: float = 1.0
    max_outer: int = 20
    weight_tolerance: float = 1e-6

    def __post_init__(self):
        if not (np.isfinite(self.phi) and self.phi > 0):
            raise ValueError("phi must be finite and positive")


def dcs_weight(e2: float, phi: float) -> float:
    """Redescending weight ``min(1, 2 phi / (phi + e2))`` for a squared error."""
    if e2 < 0:
        raise NegativeInput("squared error must be non-negative")
    return min(1.0, 2.0 * phi / (phi + e2))


def dcs_weights(e2: np.ndarray, phi: float) -> np.ndarray:
    e2 = np.asarray(e2, dtype=np.float64)
    if np.any(e2 < 0):
        raise NegativeInput("squared error must be non-negative")
    return np.minimum(1.0, 2.0 * phi / (phi + e2))


def _squared_errors(graph: FactorGraph, X: StateTrajectory, indices) -> np.ndarray:
    return np.array([float(np.sum(whitened_residual(graph.factors[i], X) ** 2)) for i in indices])


def solve_dcs(
    graph: FactorGraph,
    X0: StateTrajectory,
    dcs: DcsConfig | None = None,
    solver: SolverConfig | None = None,
) -> tuple[StateTrajectory, SolveReport]:
    """Iteratively reweighted solve with DCS weights on measurement factors.

    Weights come from the previous iterate's residuals; the loop ends when no
    weight moves by more than ``dcs.weight_tolerance`` or after
    ``dcs.max_outer`` reweighting passes.
    """
    dcs = dcs or DcsConfig()
    meas = graph.measurement_indices()
    weights = np.ones(len(graph.factors))
    X, report = solve(graph, X0, solver)
    if not meas:
        return X, report
    for outer in range(dcs.max_outer):
        new = dcs_weights(_squared_errors(graph, X, meas), dcs.phi)
        change = float(np.max(np.abs(new - weights[meas])))
        weights[meas] = new
        X, report = solve(graph, X, solver, weights=weights)
        log.debug("dcs pass %d: max weight change %.3g", outer, change)
        if change < dcs.weight_tolerance:
            break
    report.outer_iterations = outer + 1
    report.weights = weights
    return X, report


class StaticMixture:
    """Fixed Gaussian mixture over the residual domain."""

    def __init__(self, weights, means, covariances):
        weights = np.asarray(weights, dtype=np.float64).ravel()
        means = np.asarray(means, dtype=np.float64)
        covs = np.asarray(covariances, dtype=np.float64)
        if means.ndim == 1:
            means = means[:, None]
        if covs.ndim == 1:
            covs = covs[:, None, None]
        if means.shape[0] != weights.shape[0] or covs.shape[0] != weights.shape[0]:
            raise DimensionMismatch("weights, means and covariances disagree on component count")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be positive and sum to one")
        self.weights = weights
        self.noise = [NoiseModel(c, m) for m, c in zip(means, covs)]

    @property
    def dim(self) -> int:
        return self.noise[0].dim

    def __len__(self) -> int:
        return len(self.weights)

    @classmethod
    def from_config(cls, components) -> "StaticMixture":
        """Build from ``[{"weight":..., "mean":..., "covariance":...}, ...]``."""
        w = [float(c["weight"]) for c in components]
        m = [np.atleast_1d(np.asarray(c.get("mean", 0.0), dtype=np.float64)) for c in components]
        cov = [np.atleast_2d(np.asarray(c["covariance"], dtype=np.float64)) for c in components]
        return cls(w, m, cov)

    def to_config(self) -> list[dict]:
        return [
            {"weight": float(w), "mean": n.mean.tolist(), "covariance": n.covariance.tolist()}
            for w, n in zip(self.weights, self.noise)
        ]


def _log_weighted_density(r: np.ndarray, w: float, noise: NoiseModel) -> float:
    z = noise.whiten(r)
    logdet = 2.0 * float(np.sum(np.log(np.diag(noise.sqrt_cov))))
    return np.log(w) - 0.5 * (z @ z + logdet + noise.dim * np.log(2.0 * np.pi))


def max_mixture_select(r, mix: StaticMixture) -> tuple[int, NoiseModel]:
    """Index and noise model of the component maximising ``w_i N(r; mu_i, L_i)``."""
    r = np.atleast_1d(np.asarray(r, dtype=np.float64))
    if r.shape != (mix.dim,):
        raise DimensionMismatch(f"residual of dimension {r.shape[0]} vs mixture dimension {mix.dim}")
    scores = [_log_weighted_density(r, w, n) for w, n in zip(mix.weights, mix.noise)]
    best = int(np.argmax(scores))  # argmax returns the first maximum
    return best, mix.noise[best]


def solve_max_mixture(
    graph: FactorGraph,
    X0: StateTrajectory,
    mix: StaticMixture | dict,
    solver: SolverConfig | None = None,
    max_outer: int = 20,
) -> tuple[StateTrajectory, SolveReport]:
    """Alternate component assignment and re-solving until assignments settle.

    ``mix`` may be a single mixture or a mapping from factor kind to mixture
    (needed when measurement kinds live on different residual scales).  The
    graph passed in is left untouched; a copy carries the swapped models.
    """
    g = graph.copy()
    meas = g.measurement_indices()
    X, report = solve(g, X0, solver)
    previous = None
    assignments: list[int] = []
    outer = 0
    while outer < max_outer:
        outer += 1
        assignments = []
        changed = 0
        for i in meas:
            f = g.factors[i]
            m = mix[f.kind] if isinstance(mix, dict) else mix
            comp, noise = max_mixture_select(residual(f, X), m)
            assignments.append(comp)
            changed += g.set_noise(i, noise)
        if assignments == previous or changed == 0:
            break
        previous = assignments
        X, report = solve(g, X, solver)
    report.outer_iterations = outer
    report.assignments = assignments
    return X, report
