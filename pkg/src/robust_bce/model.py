"""Factor-graph description of the batch estimation problem.

A trajectory holds one state row per epoch: ``[position..., bias]``.  Factors
evaluate a measurement prediction ``h(X)`` on a subset of epochs; the residual
is ``y - h(X)`` and its weighting comes from the factor's :class:`NoiseModel`.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse

from . import kernels
from .errors import (
    DimensionMismatch,
    DisconnectedGraph,
    EmptyProblem,
    NonPositiveDefinite,
    PairingError,
)

OBSERVATION_KINDS = ("range", "phase_like", "prior", "between")
RANGE_KINDS = ("range", "phase_like", "range_phase")
CANONICAL_FEATURES = ("elevation_deg", "azimuth_deg", "signal_strength_dbhz")


@dataclass
class StateTrajectory:
    """Per-epoch platform states, shape ``(n_epochs, state_dim)``.

    The last column is the clock-like bias; the leading columns are the
    position.  A single-column trajectory is allowed for abstract problems.
    """

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise DimensionMismatch(f"trajectory must be (n_epochs, state_dim), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("trajectory contains non-finite state components")
        self.values = values

    @property
    def n_epochs(self) -> int:
        return self.values.shape[0]

    @property
    def state_dim(self) -> int:
        return self.values.shape[1]

    @property
    def positions(self) -> np.ndarray:
        return self.values[:, :-1]

    @property
    def bias(self) -> np.ndarray:
        return self.values[:, -1]

    def flat(self) -> np.ndarray:
        return self.values.ravel().copy()

    @classmethod
    def from_flat(cls, vec: np.ndarray, state_dim: int) -> "StateTrajectory":
        return cls(np.asarray(vec, dtype=np.float64).reshape(-1, state_dim))

    def copy(self) -> "StateTrajectory":
        return StateTrajectory(self.values.copy())


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Gaussian residual model ``N(mean, covariance)``."""

    covariance: np.ndarray
    mean: np.ndarray | None = None

    def __post_init__(self):
        cov = np.atleast_2d(np.array(self.covariance, dtype=np.float64))
        if cov.shape[0] != cov.shape[1]:
            raise DimensionMismatch(f"covariance must be square, got {cov.shape}")
        scale = max(np.abs(cov).max(), np.finfo(float).tiny)
        if not np.all(np.isfinite(cov)) or np.abs(cov - cov.T).max() > 1e-9 * scale:
            raise NonPositiveDefinite("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        mean = np.zeros(cov.shape[0]) if self.mean is None else np.array(self.mean, dtype=np.float64).ravel()
        if mean.shape != (cov.shape[0],):
            raise DimensionMismatch("mean and covariance dimensions differ")
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "mean", mean)
        _ = self.sqrt_cov  # validate positive definiteness eagerly

    @classmethod
    def isotropic(cls, sigma: float, dim: int = 1) -> "NoiseModel":
        return cls(np.eye(dim) * float(sigma) ** 2)

    @classmethod
    def diagonal(cls, sigmas: Sequence[float]) -> "NoiseModel":
        return cls(np.diag(np.asarray(sigmas, dtype=np.float64) ** 2))

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    @cached_property
    def sqrt_cov(self) -> np.ndarray:
        """Lower-triangular ``L`` with ``L @ L.T == covariance``."""
        try:
            chol = np.linalg.cholesky(self.covariance)
        except np.linalg.LinAlgError as exc:
            raise NonPositiveDefinite("covariance is not positive definite") from exc
        if np.any(np.diag(chol) <= 0):
            raise NonPositiveDefinite("covariance is not positive definite")
        return chol

    @cached_property
    def whitener(self) -> np.ndarray:
        """``L^{-1}``, the matrix applied to mean-centred residuals."""
        return scipy.linalg.solve_triangular(self.sqrt_cov, np.eye(self.dim), lower=True)

    def whiten(self, r: np.ndarray) -> np.ndarray:
        return self.whitener @ (np.asarray(r, dtype=np.float64) - self.mean)

    def same_as(self, other: "NoiseModel") -> bool:
        return (
            other is self
            or (
                other.dim == self.dim
                and np.array_equal(other.covariance, self.covariance)
                and np.array_equal(other.mean, self.mean)
            )
        )

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "covariance": self.covariance.tolist()}


@dataclass
class Observation:
    """One recorded measurement plus its metadata features."""

    epoch_index: int
    kind: str
    value: np.ndarray
    beacon: np.ndarray | None = None
    metadata: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in OBSERVATION_KINDS:
            raise ValueError(f"unknown observation kind {self.kind!r}")
        self.epoch_index = int(self.epoch_index)
        if self.epoch_index < 0:
            raise ValueError("epoch_index must be non-negative")
        self.value = np.atleast_1d(np.array(self.value, dtype=np.float64))
        if self.kind in ("range", "phase_like"):
            if self.beacon is None:
                raise ValueError(f"{self.kind} observation requires a beacon position")
            self.beacon = np.array(self.beacon, dtype=np.float64).ravel()
            if self.value.shape != (1,):
                raise DimensionMismatch("range-type observations are scalar")
        elif self.beacon is not None:
            raise ValueError(f"{self.kind} observation must not carry a beacon")
        meta = {str(k): float(v) for k, v in dict(self.metadata).items()}
        if not all(np.isfinite(v) for v in meta.values()):
            raise ValueError("metadata entries must be finite")
        self.metadata = meta


@dataclass
class Factor:
    """A single cost term of the factor graph.

    ``function`` is only used for ``kind == "custom"``; it receives the list of
    touched state rows and returns ``(prediction, [jacobian per state])``.
    """

    kind: str
    states: tuple[int, ...]
    measured: np.ndarray
    noise: NoiseModel
    beacon: np.ndarray | None = None
    observations: tuple[int, ...] = ()
    function: Callable | None = None
    measurement: bool | None = None

    def __post_init__(self):
        self.states = tuple(int(s) for s in self.states)
        if not self.states or min(self.states) < 0:
            raise ValueError("factor needs at least one valid state index")
        self.measured = np.atleast_1d(np.array(self.measured, dtype=np.float64))
        if self.measured.shape != (self.noise.dim,):
            raise DimensionMismatch(
                f"residual dimension {self.measured.shape[0]} != noise dimension {self.noise.dim}"
            )
        if self.kind == "custom" and self.function is None:
            raise ValueError("custom factor requires a measurement function")
        if self.beacon is not None:
            self.beacon = np.array(self.beacon, dtype=np.float64).ravel()
        if self.measurement is None:
            self.measurement = self.kind in RANGE_KINDS

    @property
    def dim(self) -> int:
        return self.measured.shape[0]


def predict(factor: Factor, X: StateTrajectory) -> tuple[np.ndarray, list[np.ndarray]]:
    """Evaluate ``h(X)`` for one factor together with its per-state Jacobians."""
    if max(factor.states) >= X.n_epochs:
        raise DimensionMismatch("factor references an epoch outside the trajectory")
    rows = [X.values[s] for s in factor.states]
    sdim = X.state_dim
    if factor.kind in RANGE_KINDS:
        ndim = factor.beacon.shape[0]
        if sdim != ndim + 1:
            raise DimensionMismatch(f"beacon is {ndim}D but state dimension is {sdim}")
        diff = rows[0][:ndim] - factor.beacon
        dist = float(np.sqrt(diff @ diff))
        grad = np.zeros(sdim)
        if dist > 0:
            grad[:ndim] = diff / dist
        grad[ndim] = 1.0
        pred = np.full(factor.dim, dist + rows[0][ndim])
        return pred, [np.tile(grad, (factor.dim, 1))]
    if factor.kind == "prior":
        if factor.dim != sdim:
            raise DimensionMismatch("prior dimension differs from state dimension")
        return rows[0].copy(), [np.eye(sdim)]
    if factor.kind == "between":
        if factor.dim != sdim or len(rows) != 2:
            raise DimensionMismatch("between factor must join two full states")
        return rows[1] - rows[0], [-np.eye(sdim), np.eye(sdim)]
    if factor.kind == "custom":
        pred, jacs = factor.function(rows)
        pred = np.atleast_1d(np.asarray(pred, dtype=np.float64))
        jacs = [np.atleast_2d(np.asarray(j, dtype=np.float64)) for j in jacs]
        if pred.shape != (factor.dim,) or any(j.shape != (factor.dim, sdim) for j in jacs):
            raise DimensionMismatch("custom factor returned inconsistent shapes")
        return pred, jacs
    raise ValueError(f"unknown factor kind {factor.kind!r}")


def residual(factor: Factor, X: StateTrajectory) -> np.ndarray:
    """Raw residual ``y - h(X)``."""
    pred, _ = predict(factor, X)
    return factor.measured - pred


def whitened_residual(factor: Factor, X: StateTrajectory) -> np.ndarray:
    """``L^{-1} (r - mean)``; its squared norm is the Mahalanobis cost."""
    return factor.noise.whiten(residual(factor, X))


class FactorGraph:
    """Ordered factor list over a fixed number of epochs.

    Construction validates that every epoch is tied, through multi-epoch
    factors, to an epoch carrying a prior factor.
    """

    def __init__(self, n_epochs: int, state_dim: int, factors: Sequence[Factor], observations=None):
        self.n_epochs = int(n_epochs)
        self.state_dim = int(state_dim)
        self.factors = list(factors)
        self.observations = list(observations) if observations is not None else []
        if self.n_epochs < 1:
            raise EmptyProblem("graph needs at least one epoch")
        for f in self.factors:
            if max(f.states) >= self.n_epochs:
                raise DisconnectedGraph(f"factor references epoch {max(f.states)} of {self.n_epochs}")
        self._check_connected()

    def _check_connected(self):
        parent = list(range(self.n_epochs))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        anchored = set()
        for f in self.factors:
            root = find(f.states[0])
            for s in f.states[1:]:
                other = find(s)
                if other != root:
                    parent[other] = root
            if f.kind == "prior":
                anchored.add(f.states[0])
        roots = {find(a) for a in anchored}
        loose = [e for e in range(self.n_epochs) if find(e) not in roots]
        if loose:
            raise DisconnectedGraph(f"epochs {loose[:5]} are not connected to a prior")

    @property
    def n_variables(self) -> int:
        return self.n_epochs * self.state_dim

    def measurement_indices(self) -> list[int]:
        return [i for i, f in enumerate(self.factors) if f.measurement]

    def copy(self) -> "FactorGraph":
        """Copy whose noise models may be replaced without touching the original."""
        dup = copy.copy(self)
        dup.factors = [copy.copy(f) for f in self.factors]
        return dup

    def set_noise(self, index: int, noise: NoiseModel) -> bool:
        """Install a noise model on one factor; returns whether it changed."""
        f = self.factors[index]
        if noise.dim != f.dim:
            raise DimensionMismatch("noise model dimension differs from factor dimension")
        if f.noise.same_as(noise):
            return False
        f.noise = noise
        return True


def build_graph(
    observations: Sequence[Observation],
    prior: tuple[np.ndarray, NoiseModel],
    motion_noise: NoiseModel,
    *,
    n_epochs: int | None = None,
    range_noise: NoiseModel | None = None,
    phase_noise: NoiseModel | None = None,
    pair_phase: bool = False,
) -> FactorGraph:
    """Assemble the factor graph for a list of observations.

    Factor order is: the prior on epoch 0, one constant-position between
    factor per consecutive epoch pair, then one measurement factor per
    range-type observation in input order.  Explicit ``prior``/``between``
    observations add further factors after those.

    With ``pair_phase`` a range and a phase-like observation sharing epoch and
    beacon become one two-dimensional factor; any unmatched observation of
    either kind raises :class:`PairingError`.
    """
    observations = list(observations)
    if not observations:
        raise EmptyProblem("no observations")
    prior_mean, prior_noise = prior
    prior_mean = np.atleast_1d(np.asarray(prior_mean, dtype=np.float64))
    state_dim = prior_mean.shape[0]
    max_epoch = max(o.epoch_index for o in observations)
    if n_epochs is None:
        n_epochs = max_epoch + 1
    if max_epoch >= n_epochs:
        raise DisconnectedGraph(f"observation epoch {max_epoch} outside {n_epochs} epochs")
    range_noise = range_noise or NoiseModel.isotropic(1.0)
    phase_noise = phase_noise or NoiseModel.isotropic(0.01)

    factors = [Factor("prior", (0,), prior_mean, prior_noise, measurement=False)]
    zero = np.zeros(state_dim)
    for e in range(1, n_epochs):
        factors.append(Factor("between", (e - 1, e), zero, motion_noise, measurement=False))

    extra = []
    ranges = [i for i, o in enumerate(observations) if o.kind in ("range", "phase_like")]
    has_phase = any(observations[i].kind == "phase_like" for i in ranges)
    for i, o in enumerate(observations):
        if o.kind in ("range", "phase_like") and o.beacon.shape[0] + 1 != state_dim:
            raise DimensionMismatch("beacon dimension inconsistent with the state dimension")
        if o.kind == "prior":
            extra.append(Factor("prior", (o.epoch_index,), o.value, prior_noise, observations=(i,), measurement=False))
        elif o.kind == "between":
            if o.epoch_index == 0:
                raise DisconnectedGraph("between observation on epoch 0 has no predecessor")
            extra.append(
                Factor("between", (o.epoch_index - 1, o.epoch_index), o.value, motion_noise,
                       observations=(i,), measurement=False)
            )

    if pair_phase and has_phase:
        factors.extend(_paired_factors(observations, ranges, range_noise, phase_noise))
    else:
        for i in ranges:
            o = observations[i]
            noise = range_noise if o.kind == "range" else phase_noise
            factors.append(Factor(o.kind, (o.epoch_index,), o.value, noise, beacon=o.beacon, observations=(i,)))
    factors.extend(extra)
    return FactorGraph(n_epochs, state_dim, factors, observations)


def _paired_factors(observations, ranges, range_noise, phase_noise):
    pending: dict[tuple, int] = {}
    pairs: dict[tuple, list] = {}
    order = []
    for i in ranges:
        o = observations[i]
        key = (o.epoch_index, tuple(o.beacon.tolist()))
        slot = pairs.setdefault(key, [None, None])
        if key not in pending:
            pending[key] = i
            order.append(key)
        pos = 0 if o.kind == "range" else 1
        if slot[pos] is not None:
            raise PairingError(f"duplicate {o.kind} observation for epoch/beacon {key}")
        slot[pos] = i
    cov = scipy.linalg.block_diag(range_noise.covariance, phase_noise.covariance)
    noise = NoiseModel(cov)
    out = []
    for key in order:
        ri, pi = pairs[key]
        if ri is None or pi is None:
            raise PairingError(f"unpaired observation at epoch/beacon {key}")
        ro, po = observations[ri], observations[pi]
        out.append(
            Factor("range_phase", (ro.epoch_index,), [ro.value[0], po.value[0]], noise,
                   beacon=ro.beacon, observations=(ri, pi))
        )
    return out


def _stack_whiteners(factors):
    cache: dict[int, tuple] = {}
    mats, means = [], []
    for f in factors:
        key = id(f.noise)
        if key not in cache:
            cache[key] = (f.noise.whitener, f.noise.mean)
        w, m = cache[key]
        mats.append(w)
        means.append(m)
    return np.array(mats), np.array(means)


def linearize(graph: FactorGraph, X: StateTrajectory, weights=None):
    """Whitened Jacobian of the predictions and stacked whitened residuals.

    Returns ``(J, b, blocks)`` where ``J = L^{-1} dh/dX`` (sparse CSR, one row
    block per factor in graph order), ``b = L^{-1}(y - h(X) - mean)`` and
    ``blocks`` lists the row slice of each factor.  The Jacobian of the
    whitened residual itself is ``-J``.  Optional per-factor ``weights`` scale
    each block by ``sqrt(w)``.
    """
    if X.state_dim != graph.state_dim or X.n_epochs != graph.n_epochs:
        raise DimensionMismatch(
            f"trajectory {X.values.shape} does not match graph ({graph.n_epochs}, {graph.state_dim})"
        )
    if not np.all(np.isfinite(X.values)):
        raise ValueError("trajectory is not finite")
    sdim = graph.state_dim
    factors = graph.factors
    offsets = np.zeros(len(factors) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([f.dim for f in factors])
    nrows = int(offsets[-1])
    b = np.empty(nrows)
    rows_list, cols_list, vals_list = [], [], []

    range_idx = [i for i, f in enumerate(factors) if f.kind in RANGE_KINDS]
    if range_idx:
        _linearize_ranges(graph, X, range_idx, offsets, b, rows_list, cols_list, vals_list)

    in_range = set(range_idx)
    for i, f in enumerate(factors):
        if i in in_range:
            continue
        pred, jacs = predict(f, X)
        w = f.noise.whitener
        b[offsets[i]:offsets[i + 1]] = w @ (f.measured - pred - f.noise.mean)
        for s, jac in zip(f.states, jacs):
            block = w @ jac
            rr, cc = np.nonzero(np.ones_like(block, dtype=bool))
            rows_list.append(offsets[i] + rr)
            cols_list.append(s * sdim + cc)
            vals_list.append(block.ravel())

    rows = np.concatenate(rows_list)
    cols = np.concatenate(cols_list)
    vals = np.concatenate(vals_list)
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        row_scale = np.repeat(np.sqrt(weights), np.diff(offsets))
        b = b * row_scale
        vals = vals * row_scale[rows]
    J = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(nrows, graph.n_variables))
    J.sum_duplicates()
    blocks = [slice(int(offsets[i]), int(offsets[i + 1])) for i in range(len(factors))]
    return J, b, blocks


def _linearize_ranges(graph, X, idx, offsets, b, rows_list, cols_list, vals_list):
    sdim = graph.state_dim
    by_dim: dict[int, list[int]] = {}
    for i in idx:
        by_dim.setdefault(graph.factors[i].dim, []).append(i)
    for dim, members in by_dim.items():
        fs = [graph.factors[i] for i in members]
        epochs = np.array([f.states[0] for f in fs], dtype=np.int64)
        beacons = np.array([f.beacon for f in fs])
        if beacons.shape[1] + 1 != sdim:
            raise DimensionMismatch("beacon dimension inconsistent with the state dimension")
        pred, grad = kernels.range_predict(X.values, epochs, beacons)
        measured = np.array([f.measured for f in fs])
        whiteners, means = _stack_whiteners(fs)
        res = measured - pred[:, None] - means
        white = np.einsum("nij,nj->ni", whiteners, res)
        # every output row of a range factor shares the same gradient
        jac = whiteners.sum(axis=2)[:, :, None] * grad[:, None, :]
        base = offsets[members]
        for r in range(dim):
            b[base + r] = white[:, r]
            rows_list.append(np.repeat(base + r, sdim))
            cols_list.append((epochs[:, None] * sdim + np.arange(sdim)).ravel())
            vals_list.append(jac[:, r, :].ravel())
