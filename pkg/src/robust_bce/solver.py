"""Levenberg-Marquardt minimisation of the weighted least-squares cost."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .errors import LinearAlgebraFailure, WeightCountMismatch
from .model import FactorGraph, StateTrajectory, linearize

DENSE_EPOCH_LIMIT = 50
_DAMPING_CEILING = 1e16


@dataclass
class SolverConfig:
    max_iterations: int = 100
    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.1
    cost_tolerance: float = 1e-8
    step_tolerance: float = 1e-10

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        for name in ("initial_damping", "damping_up", "damping_down", "cost_tolerance", "step_tolerance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class SolveReport:
    cost: float
    iterations: int
    reason: str  # "cost_tol", "step_tol" or "max_iter"
    cost_trace: list[float] = field(default_factory=list)
    outer_iterations: int = 1
    weights: np.ndarray | None = None
    assignments: list[int] | None = None


def _check_weights(graph: FactorGraph, weights):
    if weights is None:
        return None
    weights = np.asarray(weights, dtype=np.float64).ravel()
    if weights.shape[0] != len(graph.factors):
        raise WeightCountMismatch(f"{weights.shape[0]} weights for {len(graph.factors)} factors")
    if np.any(weights < 0) or np.any(weights > 1) or not np.all(np.isfinite(weights)):
        raise ValueError("weights must lie in [0, 1]")
    return weights


def weighted_cost(graph: FactorGraph, X: StateTrajectory, weights=None) -> float:
    """``sum_n w_n |whitened residual_n|^2`` (weights default to one)."""
    weights = _check_weights(graph, weights)
    _, b, _ = linearize(graph, X, weights)
    return float(b @ b)


def _solve_damped(H, g, damping, dense):
    diag = H.diagonal() if not dense else np.diag(H).copy()
    # unobserved directions would otherwise leave the system singular
    floor = 1e-12 * max(float(np.max(np.abs(diag))), 1.0)
    scaled = damping * np.maximum(diag, floor)
    if dense:
        A = H + np.diag(scaled)
        try:
            cho = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
            return scipy.linalg.cho_solve(cho, g, check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            return None
    A = (H + scipy.sparse.diags(scaled)).tocsc()
    try:
        step = scipy.sparse.linalg.spsolve(A, g)
    except RuntimeError:
        return None
    return step if np.all(np.isfinite(step)) else None


def solve(
    graph: FactorGraph,
    X0: StateTrajectory,
    config: SolverConfig | None = None,
    weights=None,
) -> tuple[StateTrajectory, SolveReport]:
    """Minimise the (optionally weighted) cost starting from ``X0``.

    Damping is applied to the normal-equation diagonal (Marquardt scaling);
    uphill steps are rejected, so the recorded cost trace never increases.
    """
    config = config or SolverConfig()
    weights = _check_weights(graph, weights)
    dense = graph.n_epochs < DENSE_EPOCH_LIMIT
    x = X0.flat()
    sdim = graph.state_dim
    J, b, _ = linearize(graph, StateTrajectory.from_flat(x, sdim), weights)
    cost = float(b @ b)
    trace = [cost]
    damping = config.initial_damping
    reason = "max_iter"
    iterations = 0
    while iterations < config.max_iterations:
        iterations += 1
        H = (J.T @ J)
        g = J.T @ b
        if dense:
            H = H.toarray()
        else:
            H = H.tocsr()
        g = np.asarray(g).ravel()
        accepted = False
        factored = False
        while damping <= _DAMPING_CEILING:
            step = _solve_damped(H, g, damping, dense)
            if step is None:
                damping *= config.damping_up
                continue
            factored = True
            if np.linalg.norm(step) <= config.step_tolerance * (np.linalg.norm(x) + config.step_tolerance):
                reason = "step_tol"
                break
            x_new = x + step
            J_new, b_new, _ = linearize(graph, StateTrajectory.from_flat(x_new, sdim), weights)
            cost_new = float(b_new @ b_new)
            if np.isfinite(cost_new) and cost_new <= cost:
                accepted = True
                break
            damping *= config.damping_up
        if not factored:
            raise LinearAlgebraFailure("normal equations singular even at the damping ceiling")
        if not accepted:
            # converged: either a negligible step or no descent left at the damping ceiling
            reason = "step_tol"
            break
        decrease = cost - cost_new
        x, J, b, cost = x_new, J_new, b_new, cost_new
        trace.append(cost)
        damping = max(damping * config.damping_down, 1e-15)
        if decrease <= config.cost_tolerance * max(cost + decrease, np.finfo(float).tiny):
            reason = "cost_tol"
            break
    return StateTrajectory.from_flat(x, sdim), SolveReport(cost, iterations, reason, trace)
