"""Synthetic range/phase scenarios with metadata-coupled degradation."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import LengthMismatch, ObservabilityError
from .model import Observation, StateTrajectory

COUPLINGS = ("none", "by_signal_strength", "by_elevation", "random")
TRAJECTORIES = ("static", "constant_velocity", "waypoint_path")


@dataclass
class DegradationConfig:
    fraction: float = 0.0
    inflation: float = 10.0
    offset: float = 0.0
    coupling: str = "none"
    ss_drop: float = 15.0
    elevation_spread: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("degradation fraction must lie in [0, 1]")
        if not self.inflation > 1.0:
            raise ValueError("inflation factor must exceed 1")
        if self.coupling not in COUPLINGS:
            raise ValueError(f"coupling must be one of {COUPLINGS}")


@dataclass
class ScenarioConfig:
    seed: int = 0
    n_epochs: int = 60
    dim: int = 2
    trajectory: str = "constant_velocity"
    start: list = field(default_factory=lambda: [0.0, 0.0])
    velocity: list = field(default_factory=lambda: [1.0, 0.5])
    waypoints: list = field(default_factory=list)
    speed: float = 1.0
    dt: float = 1.0
    beacons: object = "ring(8, 100)"
    sigma_range: float = 1.0
    sigma_phase: float = 0.01
    include_phase: bool = False
    clock_bias: float = 10.0
    clock_drift: float = 0.1
    ss_baseline: float = 45.0
    ss_jitter: float = 1.0
    elevation_range: list = field(default_factory=lambda: [10.0, 80.0])
    degradation: DegradationConfig = field(default_factory=DegradationConfig)

    def __post_init__(self):
        if isinstance(self.degradation, dict):
            self.degradation = DegradationConfig(**self.degradation)
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"trajectory must be one of {TRAJECTORIES}")
        if self.n_epochs < 1:
            raise ValueError("n_epochs must be >= 1")
        need = 3 if self.dim == 2 else 4
        if len(self.beacon_positions()) < need:
            raise ObservabilityError(f"{self.dim}D positioning with a bias needs at least {need} beacons")

    def beacon_positions(self) -> np.ndarray:
        layout = self.beacons
        if isinstance(layout, str):
            m = re.fullmatch(r"\s*ring\(\s*(\d+)\s*,\s*([-+0-9.eE]+)\s*\)\s*", layout)
            if not m:
                raise ValueError(f"cannot parse beacon layout {layout!r}")
            n, radius = int(m.group(1)), float(m.group(2))
            ang = 2.0 * np.pi * np.arange(n) / max(n, 1)
            ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
            if self.dim == 3:
                # alternate heights so the vertical axis stays observable
                heights = np.where(np.arange(n) % 2 == 0, 0.2, 0.6) * radius
                ring = np.column_stack([ring, heights])
            return ring
        pos = np.asarray(layout, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != self.dim:
            raise ValueError(f"beacon positions must be (n, {self.dim})")
        return pos

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Scenario:
    truth: StateTrajectory
    observations: list[Observation]
    labels: np.ndarray  # True where the observation was degraded
    beacons: np.ndarray
    config: ScenarioConfig


def _positions(cfg: ScenarioConfig) -> np.ndarray:
    t = np.arange(cfg.n_epochs) * cfg.dt
    start = np.resize(np.asarray(cfg.start, dtype=np.float64), cfg.dim)
    if cfg.trajectory == "static":
        return np.tile(start, (cfg.n_epochs, 1))
    if cfg.trajectory == "constant_velocity":
        vel = np.resize(np.asarray(cfg.velocity, dtype=np.float64), cfg.dim)
        return start + t[:, None] * vel
    pts = np.asarray(cfg.waypoints, dtype=np.float64).reshape(-1, cfg.dim)
    if len(pts) < 2:
        raise ValueError("waypoint_path needs at least two waypoints")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    s = np.clip(t * cfg.speed, 0.0, arc[-1])
    return np.stack([np.interp(s, arc, pts[:, c]) for c in range(cfg.dim)], axis=1)


def _degraded_mask(cfg: ScenarioConfig, rng, n_obs: int, elevations: np.ndarray) -> np.ndarray:
    deg = cfg.degradation
    if deg.fraction <= 0.0:
        return np.zeros(n_obs, dtype=bool)
    if deg.coupling == "random":
        count = int(round(deg.fraction * n_obs))
        mask = np.zeros(n_obs, dtype=bool)
        mask[rng.permutation(n_obs)[:count]] = True
        return mask
    if deg.coupling == "by_elevation":
        score = elevations + rng.normal(0.0, deg.elevation_spread, n_obs)
        count = int(round(deg.fraction * n_obs))
        mask = np.zeros(n_obs, dtype=bool)
        mask[np.argsort(score, kind="stable")[:count]] = True
        return mask
    return rng.random(n_obs) < deg.fraction


def generate(config: ScenarioConfig) -> Scenario:
    """Draw a scenario; identical configs give bit-identical output."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    beacons = cfg.beacon_positions()
    nb = len(beacons)
    pos = _positions(cfg)
    bias = cfg.clock_bias + np.concatenate([[0.0], np.cumsum(rng.normal(0.0, cfg.clock_drift, cfg.n_epochs - 1))])
    truth = StateTrajectory(np.column_stack([pos, bias]))
    lo, hi = cfg.elevation_range
    fixed_el = rng.uniform(lo, hi, nb)

    epochs = np.repeat(np.arange(cfg.n_epochs), nb)
    which = np.tile(np.arange(nb), cfg.n_epochs)
    n_pairs = len(epochs)
    diff = beacons[which] - pos[epochs]
    azimuth = np.mod(np.degrees(np.arctan2(diff[:, 0], diff[:, 1])), 360.0)
    if cfg.dim == 2:
        elevation = fixed_el[which]
    else:
        elevation = np.degrees(np.arctan2(diff[:, 2], np.linalg.norm(diff[:, :2], axis=1)))
    degraded = _degraded_mask(cfg, rng, n_pairs, elevation)
    deg = cfg.degradation
    ss = cfg.ss_baseline + rng.normal(0.0, cfg.ss_jitter, n_pairs)
    if deg.coupling == "by_signal_strength":
        ss = ss - deg.ss_drop * degraded

    geometric = np.linalg.norm(diff, axis=1) + bias[epochs]
    z_range = rng.normal(0.0, 1.0, n_pairs)
    range_err = np.where(degraded, deg.offset + deg.inflation * cfg.sigma_range * z_range, cfg.sigma_range * z_range)
    if cfg.include_phase:
        ratio = cfg.sigma_phase / cfg.sigma_range
        z_phase = rng.normal(0.0, 1.0, n_pairs)
        phase_err = np.where(
            degraded, deg.offset * ratio + deg.inflation * cfg.sigma_phase * z_phase, cfg.sigma_phase * z_phase
        )

    observations: list[Observation] = []
    labels: list[bool] = []
    for r in range(n_pairs):
        meta = {
            "elevation_deg": float(elevation[r]),
            "azimuth_deg": float(azimuth[r]),
            "signal_strength_dbhz": float(ss[r]),
        }
        b = beacons[which[r]]
        observations.append(Observation(int(epochs[r]), "range", geometric[r] + range_err[r], beacon=b, metadata=meta))
        labels.append(bool(degraded[r]))
        if cfg.include_phase:
            observations.append(
                Observation(int(epochs[r]), "phase_like", geometric[r] + phase_err[r], beacon=b, metadata=meta)
            )
            labels.append(bool(degraded[r]))
    return Scenario(truth, observations, np.array(labels, dtype=bool), beacons, cfg)


def oracle_error(truth: StateTrajectory, estimate: StateTrajectory) -> np.ndarray:
    """Per-epoch horizontal root-sum-of-squares position error."""
    if truth.n_epochs != estimate.n_epochs:
        raise LengthMismatch(f"{truth.n_epochs} truth epochs vs {estimate.n_epochs} estimated")
    d = truth.positions[:, :2] - estimate.positions[:, :2]
    return np.sqrt(np.sum(d * d, axis=1))
