"""Outer robust-iteration loop: estimate, cluster residuals, relearn noise, repeat.

Modes ``L2``, ``DCS`` and ``MM`` are the baselines.  ``BCE`` clusters the
measurement residuals directly; ``BCE_AD`` first augments each residual with
its observation metadata, picks informative columns with spectral feature
selection and clusters in that augmented space.  In both cases the resulting
hard assignments partition the raw residuals, whose per-group sample mean and
covariance become the new measurement noise models.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import CoverageGap, DimensionMismatch, EmptyPartition, FeatureNameMismatch, ModeConfigMismatch
from .features import FsConfig, select_features, standardize
from .model import FactorGraph, NoiseModel, Observation, StateTrajectory, build_graph, residual
from .robust import DcsConfig, StaticMixture, solve_dcs, solve_max_mixture
from .solver import SolverConfig, solve
from .vbgmm import Responsibilities, VbConfig, fit

log = logging.getLogger(__name__)

MODES = ("L2", "DCS", "MM", "BCE", "BCE_AD")
RESIDUAL_NAMES = {"range": ["rho"], "phase_like": ["phi"], "range_phase": ["rho", "phi"]}


def parse_mode(text: str) -> str:
    mode = text.strip().upper().replace("-", "_")
    if mode not in MODES:
        raise ModeConfigMismatch(f"unknown mode {text!r}; valid modes: {', '.join(m.lower().replace('_', '-') for m in MODES)}")
    return mode


@dataclass
class PipelineConfig:
    mode: str = "BCE_AD"
    vb: VbConfig = field(default_factory=VbConfig)
    fs: FsConfig = field(default_factory=FsConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    dcs: DcsConfig = field(default_factory=DcsConfig)
    mixture: dict | None = None  # kind -> list of {weight, mean, covariance}
    max_outer: int = 10
    tolerance: float = 1e-4
    residual_rows: str = "paired"
    range_sigma: float = 1.0
    phase_sigma: float = 0.01
    prior_position_sigma: float = 1000.0
    prior_bias_sigma: float = 1000.0
    motion_sigma: float = 2.0
    clock_sigma: float = 1.0

    def __post_init__(self):
        self.mode = parse_mode(self.mode)
        for name, kind in (("vb", VbConfig), ("fs", FsConfig), ("solver", SolverConfig), ("dcs", DcsConfig)):
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, kind(**value))
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")
        if self.residual_rows not in ("paired", "independent"):
            raise ValueError("residual_rows must be 'paired' or 'independent'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AugmentedDataset:
    """Rows of residuals (optionally followed by metadata) for one factor group."""

    raw: np.ndarray
    names: list[str]
    n_residual: int
    factor_indices: list[int]
    standardized: np.ndarray | None = None
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None
    constant: np.ndarray | None = None

    @property
    def residuals(self) -> np.ndarray:
        return self.raw[:, : self.n_residual]

    @property
    def residual_columns(self) -> list[int]:
        return list(range(self.n_residual))

    def standardize(self) -> "AugmentedDataset":
        self.standardized, self.mean, self.scale, self.constant = standardize(self.raw)
        return self


@dataclass
class IterationRecord:
    iteration: int
    cost: float
    selected: dict[str, list[str]]
    scores: dict[str, dict[str, float]]
    n_components: dict[str, int]
    assignments: dict[str, list[int]]
    trajectory: list[list[float]]


@dataclass
class IterationTrace:
    mode: str
    initial_cost: float
    iterations: list[IterationRecord] = field(default_factory=list)
    converged: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def measurement_groups(graph: FactorGraph) -> dict[str, list[int]]:
    """Measurement factor indices keyed by factor kind, in graph order."""
    groups: dict[str, list[int]] = {}
    for i in graph.measurement_indices():
        groups.setdefault(graph.factors[i].kind, []).append(i)
    return groups


def collect_residuals(graph: FactorGraph, X: StateTrajectory, factors: Sequence[int] | None = None) -> AugmentedDataset:
    """Raw residual rows for measurement factors (priors and betweens excluded)."""
    if factors is None:
        groups = measurement_groups(graph)
        if len(groups) > 1:
            raise DimensionMismatch(f"mixed measurement kinds {sorted(groups)}; pass one group")
        factors = next(iter(groups.values()), [])
    factors = list(factors)
    if not factors:
        return AugmentedDataset(np.zeros((0, 1)), ["r0"], 1, [])
    first = graph.factors[factors[0]]
    names = RESIDUAL_NAMES.get(first.kind, [f"r{i}" for i in range(first.dim)])
    rows = np.array([residual(graph.factors[i], X) for i in factors]).reshape(len(factors), first.dim)
    return AugmentedDataset(rows, list(names), first.dim, factors)


def augment(residuals: AugmentedDataset, observations: Sequence[Observation], graph: FactorGraph | None = None) -> AugmentedDataset:
    """Append each row's metadata columns and z-score every column.

    ``observations`` holds one observation per residual row; alternatively
    pass the full observation list with ``graph`` to look rows up through the
    factors' observation references.
    """
    if graph is not None:
        rows = [observations[graph.factors[i].observations[0]] for i in residuals.factor_indices]
    else:
        rows = list(observations)
    if len(rows) != residuals.raw.shape[0]:
        raise DimensionMismatch("one observation per residual row is required")
    names = sorted(rows[0].metadata) if rows else []
    for o in rows:
        if sorted(o.metadata) != names:
            raise FeatureNameMismatch(f"feature names {sorted(o.metadata)} differ from {names}")
    feats = np.array([[o.metadata[n] for n in names] for o in rows]).reshape(len(rows), len(names))
    out = AugmentedDataset(
        np.hstack([residuals.residuals, feats]),
        residuals.names[: residuals.n_residual] + names,
        residuals.n_residual,
        residuals.factor_indices,
    )
    return out.standardize()


def _sample_noise(points: np.ndarray) -> NoiseModel:
    dim = points.shape[1]
    mean = points.mean(axis=0)
    cov = np.atleast_2d(np.cov(points, rowvar=False, ddof=1)) if len(points) > 1 else np.zeros((dim, dim))
    tr = float(np.trace(cov))
    if tr <= 0:
        cov = 1e-12 * np.eye(dim)  # identical residuals: keep the model proper
    else:
        eig = np.linalg.eigvalsh(cov)
        if eig[0] <= 1e-12 * eig[-1]:
            cov = cov + 1e-9 * tr / dim * np.eye(dim)
    return NoiseModel(cov, mean)


def partition_residual_domain(assignments, residuals: np.ndarray) -> list[tuple[int, NoiseModel, np.ndarray]]:
    """Per-group sample mean/covariance of raw residuals under hard assignments.

    Groups with fewer than ``dim + 1`` members are merged into the surviving
    group whose mean is nearest in Mahalanobis distance.
    """
    labels = assignments.hard if isinstance(assignments, Responsibilities) else np.asarray(assignments)
    residuals = np.asarray(residuals, dtype=np.float64)
    if residuals.ndim == 1:
        residuals = residuals[:, None]
    if len(labels) != residuals.shape[0]:
        raise DimensionMismatch("assignments and residual rows differ in length")
    dim = residuals.shape[1]
    ids = sorted(set(labels.tolist()))
    members = {c: np.flatnonzero(labels == c) for c in ids}
    big = [c for c in ids if len(members[c]) >= dim + 1]
    if not big:
        raise EmptyPartition("no group has enough members for a covariance estimate")
    models = {c: _sample_noise(residuals[members[c]]) for c in big}
    for c in ids:
        if c in models:
            continue
        centre = residuals[members[c]].mean(axis=0)
        dist = []
        for t in big:
            z = models[t].whiten(centre)
            dist.append(float(z @ z))
        target = big[int(np.argmin(dist))]
        members[target] = np.sort(np.concatenate([members[target], members[c]]))
    return [(c, _sample_noise(residuals[members[c]]), members[c]) for c in big]


def update_uncertainty(graph: FactorGraph, partition, factor_indices: Sequence[int] | None = None) -> int:
    """Install each group's noise model on its member factors; returns the change count."""
    if factor_indices is None:
        factor_indices = graph.measurement_indices()
    factor_indices = list(factor_indices)
    covered = np.zeros(len(factor_indices), dtype=bool)
    changed = 0
    for _, noise, rows in partition:
        for r in rows:
            covered[r] = True
            changed += graph.set_noise(factor_indices[r], noise)
    if not covered.all():
        raise CoverageGap(f"{int((~covered).sum())} measurement factors lack a noise model")
    return changed


def default_mixture(config: PipelineConfig, kind: str) -> StaticMixture:
    """Arbitrary two-mode model: 80% nominal noise, 20% ten times wider."""
    sig = {"range": [config.range_sigma], "phase_like": [config.phase_sigma],
           "range_phase": [config.range_sigma, config.phase_sigma]}[kind]
    base = np.diag(np.square(sig))
    return StaticMixture([0.8, 0.2], [np.zeros(len(sig))] * 2, [base, 100.0 * base])


def _initial(graph: FactorGraph, observations: Sequence[Observation]) -> StateTrajectory:
    beacons = [o.beacon for o in observations if o.beacon is not None]
    row = np.zeros(graph.state_dim)
    if beacons:
        row[:-1] = np.mean(beacons, axis=0)
    return StateTrajectory(np.tile(row, (graph.n_epochs, 1)))


def make_graph(observations: Sequence[Observation], config: PipelineConfig, n_epochs: int | None = None) -> FactorGraph:
    beacons = [o.beacon for o in observations if o.beacon is not None]
    if not beacons:
        raise ModeConfigMismatch("range-type observations are required")
    pdim = len(beacons[0])
    prior_mean = np.zeros(pdim + 1)
    prior = NoiseModel.diagonal([config.prior_position_sigma] * pdim + [config.prior_bias_sigma])
    motion = NoiseModel.diagonal([config.motion_sigma] * pdim + [config.clock_sigma])
    return build_graph(
        observations,
        (prior_mean, prior),
        motion,
        n_epochs=n_epochs,
        range_noise=NoiseModel.isotropic(config.range_sigma),
        phase_noise=NoiseModel.isotropic(config.phase_sigma),
        pair_phase=config.residual_rows == "paired",
    )


def _cluster_group(graph, X, observations, idx, config: PipelineConfig, use_metadata: bool):
    ds = collect_residuals(graph, X, idx)
    if use_metadata:
        ds = augment(ds, observations, graph)
    else:
        ds.standardize()
    cols = ds.residual_columns
    score = None
    if use_metadata and len(ds.names) > ds.n_residual:
        score = select_features(
            ds.standardized, ds.names, config.fs,
            residual_columns=ds.residual_columns, default_eigenvectors=config.vb.truncation,
        )
        cols = [j for j in range(len(ds.names)) if score.selected[j]]
    mixture, resp, report = fit(ds.standardized[:, cols], config.vb)
    partition = partition_residual_domain(resp, ds.residuals)
    changed = update_uncertainty(graph, partition, ds.factor_indices)
    return ds, cols, score, resp, len(partition), changed


def run(
    observations: Sequence[Observation],
    config: PipelineConfig | None = None,
    *,
    n_epochs: int | None = None,
    graph: FactorGraph | None = None,
) -> tuple[StateTrajectory, IterationTrace]:
    """Estimate the trajectory with the configured mode."""
    config = config or PipelineConfig()
    observations = list(observations)
    mode = config.mode
    if graph is None:
        graph = make_graph(observations, config, n_epochs)
    else:
        graph = graph.copy()
    groups = measurement_groups(graph)
    X0 = _initial(graph, observations)
    X, report = solve(graph, X0, config.solver)
    trace = IterationTrace(mode, report.cost)
    if mode == "L2":
        trace.converged = True
        return X, trace
    if mode == "DCS":
        X, rep = solve_dcs(graph, X, config.dcs, config.solver)
        trace.iterations.append(IterationRecord(1, rep.cost, {}, {}, {}, {}, X.values.tolist()))
        trace.converged = True
        return X, trace
    if mode == "MM":
        mixes = {}
        for kind in groups:
            if config.mixture and kind in config.mixture:
                mixes[kind] = StaticMixture.from_config(config.mixture[kind])
            else:
                mixes[kind] = default_mixture(config, kind)
        X, rep = solve_max_mixture(graph, X, mixes, config.solver)
        trace.iterations.append(
            IterationRecord(rep.outer_iterations, rep.cost, {}, {}, {}, {"all": list(rep.assignments or [])},
                            X.values.tolist())
        )
        trace.converged = True
        return X, trace

    use_metadata = mode == "BCE_AD"
    prev_cost = report.cost
    for it in range(1, config.max_outer + 1):
        selected, scores, ncomp, assign = {}, {}, {}, {}
        for kind, idx in groups.items():
            ds, cols, score, resp, n_groups, _ = _cluster_group(graph, X, observations, idx, config, use_metadata)
            selected[kind] = [ds.names[j] for j in cols]
            scores[kind] = score.as_dict() if score is not None else {}
            ncomp[kind] = n_groups
            assign[kind] = resp.hard.tolist()
        X, report = solve(graph, X, config.solver)
        trace.iterations.append(IterationRecord(it, report.cost, selected, scores, ncomp, assign, X.values.tolist()))
        change = abs(prev_cost - report.cost) / max(prev_cost, np.finfo(float).tiny)
        log.debug("%s iteration %d: cost %.6g (relative change %.3g)", mode, it, report.cost, change)
        prev_cost = report.cost
        if change < config.tolerance:
            trace.converged = True
            break
    return X, trace
