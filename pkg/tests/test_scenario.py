import numpy as np
import pytest
from scipy.stats import binom

from robust_bce.errors import LengthMismatch, ObservabilityError
from robust_bce.model import StateTrajectory
from robust_bce.scenario import DegradationConfig, ScenarioConfig, generate, oracle_error


def truth_residuals(sc):
    out = []
    for o in sc.observations:
        x = sc.truth.values[o.epoch_index]
        out.append(o.value[0] - (np.linalg.norm(x[:-1] - o.beacon) + x[-1]))
    return np.array(out)


class TestGenerate:
    def test_clean_residual_spread(self):
        sc = generate(ScenarioConfig(seed=1, n_epochs=150, sigma_range=2.0))
        assert len(sc.observations) >= 1000
        assert not sc.labels.any()
        assert abs(np.std(truth_residuals(sc), ddof=1) / 2.0 - 1.0) < 0.1

    def test_signal_strength_drop(self):
        deg = DegradationConfig(0.3, 10.0, 5.0, "by_signal_strength", 15.0)
        sc = generate(ScenarioConfig(seed=2, n_epochs=150, degradation=deg))
        ss = np.array([o.metadata["signal_strength_dbhz"] for o in sc.observations])
        gap = ss[~sc.labels].mean() - ss[sc.labels].mean()
        assert abs(gap - 15.0) < 1.0

    def test_bit_identical(self):
        cfg = ScenarioConfig(seed=3, degradation=DegradationConfig(0.3, 10.0, 5.0, "by_signal_strength"))
        a, b = generate(cfg), generate(cfg)
        assert np.array_equal(a.truth.values, b.truth.values)
        assert np.array_equal(a.labels, b.labels)
        for x, y in zip(a.observations, b.observations):
            assert np.array_equal(x.value, y.value) and x.metadata == y.metadata

    @pytest.mark.parametrize("coupling", ["none", "by_signal_strength", "random", "by_elevation"])
    def test_degraded_fraction_within_binomial_bounds(self, coupling):
        p = 0.3
        sc = generate(ScenarioConfig(seed=4, n_epochs=80, degradation=DegradationConfig(p, 10.0, 0.0, coupling)))
        n = len(sc.labels)
        assert n >= 500
        lo, hi = binom.ppf([0.005, 0.995], n, p)
        assert lo <= sc.labels.sum() <= hi

    def test_uncoupled_signal_strength(self):
        sc = generate(ScenarioConfig(seed=5, n_epochs=150, degradation=DegradationConfig(0.3, 25.0, 5.0, "none")))
        ss = np.array([o.metadata["signal_strength_dbhz"] for o in sc.observations])
        assert abs(np.corrcoef(ss, sc.labels.astype(float))[0, 1]) < 0.1

    def test_labels_not_leaked(self):
        deg = DegradationConfig(0.3, 10.0, 5.0, "by_signal_strength")
        sc = generate(ScenarioConfig(seed=6, degradation=deg))
        assert len(sc.labels) == len(sc.observations)
        for o in sc.observations:
            assert set(o.metadata) == {"elevation_deg", "azimuth_deg", "signal_strength_dbhz"}

    def test_degraded_statistics(self):
        deg = DegradationConfig(0.3, 10.0, 5.0, "random")
        sc = generate(ScenarioConfig(seed=7, n_epochs=200, degradation=deg))
        r = truth_residuals(sc)
        bad = r[sc.labels]
        assert abs(bad.mean() - 5.0) < 4 * 10.0 / np.sqrt(len(bad))
        assert abs(np.std(bad, ddof=1) / 10.0 - 1.0) < 0.1

    def test_phase_observations(self):
        sc = generate(ScenarioConfig(seed=8, n_epochs=5, include_phase=True))
        kinds = [o.kind for o in sc.observations]
        assert kinds.count("range") == kinds.count("phase_like") == 5 * 8

    def test_elevation_coupling_prefers_low(self):
        deg = DegradationConfig(0.3, 10.0, 0.0, "by_elevation", elevation_spread=1.0)
        sc = generate(ScenarioConfig(seed=9, n_epochs=40, degradation=deg))
        el = np.array([o.metadata["elevation_deg"] for o in sc.observations])
        assert el[sc.labels].mean() < el[~sc.labels].mean()

    def test_three_dimensional(self):
        sc = generate(ScenarioConfig(seed=10, dim=3, n_epochs=5, start=[0, 0, 0], velocity=[1, 0, 0]))
        assert sc.truth.state_dim == 4
        assert all(o.beacon.shape == (3,) for o in sc.observations)

    def test_waypoints(self):
        cfg = ScenarioConfig(n_epochs=6, trajectory="waypoint_path", waypoints=[[0, 0], [3, 4], [3, 10]], speed=2.5)
        pos = generate(cfg).truth.positions
        np.testing.assert_allclose(pos[2], [3.0, 4.0])
        np.testing.assert_allclose(pos[5], [3.0, 10.0])

    def test_too_few_beacons(self):
        with pytest.raises(ObservabilityError):
            ScenarioConfig(beacons="ring(2, 50)")
        with pytest.raises(ObservabilityError):
            ScenarioConfig(dim=3, beacons="ring(3, 50)")

    def test_invalid_degradation(self):
        with pytest.raises(ValueError):
            DegradationConfig(fraction=1.5)
        with pytest.raises(ValueError):
            DegradationConfig(inflation=1.0)


class TestOracleError:
    def test_identical(self):
        X = StateTrajectory(np.random.default_rng(0).normal(size=(5, 3)))
        assert np.all(oracle_error(X, X) == 0.0)

    def test_constant_offset(self):
        X = StateTrajectory(np.zeros((4, 3)))
        Y = StateTrajectory(np.tile([3.0, 4.0, 9.0], (4, 1)))
        np.testing.assert_array_equal(oracle_error(X, Y), [5.0] * 4)

    def test_single_epoch(self):
        X = StateTrajectory(np.zeros((3, 3)))
        Y = StateTrajectory([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        np.testing.assert_array_equal(oracle_error(X, Y), [1.0, 0.0, 0.0])

    def test_vertical_ignored(self):
        X = StateTrajectory(np.zeros((2, 4)))
        Y = StateTrajectory([[0.0, 0.0, 7.0, 1.0], [0.0, 0.0, -2.0, 0.0]])
        np.testing.assert_array_equal(oracle_error(X, Y), [0.0, 0.0])

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            oracle_error(StateTrajectory(np.zeros((2, 3))), StateTrajectory(np.zeros((3, 3))))
