from dataclasses import replace

import numpy as np
import pytest

from robust_bce.errors import CoverageGap, DimensionMismatch, EmptyPartition, FeatureNameMismatch, ModeConfigMismatch
from robust_bce.model import NoiseModel, Observation, StateTrajectory, build_graph
from robust_bce.pipeline import (
    MODES,
    PipelineConfig,
    augment,
    collect_residuals,
    make_graph,
    parse_mode,
    partition_residual_domain,
    run,
    update_uncertainty,
)
from robust_bce.scenario import DegradationConfig, ScenarioConfig, generate, oracle_error

PRIOR = (np.zeros(3), NoiseModel.diagonal([100.0] * 3))
MOTION = NoiseModel.diagonal([1.0] * 3)
BEACONS = [[10.0, 0.0], [0.0, 10.0], [-10.0, 0.0]]


def exact_observations(x=(1.0, 2.0, 0.5), metadata=True):
    x = np.asarray(x)
    out = []
    for k, b in enumerate(BEACONS):
        meta = {"elevation_deg": 10.0 * k, "azimuth_deg": 90.0 * k, "signal_strength_dbhz": 40.0 + k} if metadata else {}
        out.append(Observation(0, "range", np.linalg.norm(x[:2] - b) + x[2], beacon=b, metadata=meta))
    return out, StateTrajectory([x])


def strip_metadata(observations):
    return [Observation(o.epoch_index, o.kind, o.value, beacon=o.beacon) for o in observations]


class TestCollectAndAugment:
    def test_counts(self):
        obs, X = exact_observations()
        ds = collect_residuals(build_graph(obs, PRIOR, MOTION), X)
        assert ds.raw.shape == (3, 1) and ds.names == ["rho"]

    def test_exact_fit_zero(self):
        obs, X = exact_observations()
        ds = collect_residuals(build_graph(obs, PRIOR, MOTION), X)
        np.testing.assert_allclose(ds.raw, 0.0, atol=1e-12)

    def test_paired_rows(self):
        obs, X = exact_observations()
        obs = obs + [Observation(0, "phase_like", o.value + 0.01, beacon=o.beacon, metadata=o.metadata) for o in obs]
        g = build_graph(obs, PRIOR, MOTION, pair_phase=True)
        ds = collect_residuals(g, X)
        assert ds.names == ["rho", "phi"]
        np.testing.assert_allclose(ds.raw, [[0.0, 0.01]] * 3, atol=1e-12)

    def test_mixed_kinds_need_a_group(self):
        obs, _ = exact_observations()
        obs = obs + [Observation(0, "phase_like", o.value, beacon=o.beacon, metadata=o.metadata) for o in obs]
        g = build_graph(obs, PRIOR, MOTION, pair_phase=False)
        with pytest.raises(DimensionMismatch):
            collect_residuals(g, StateTrajectory(np.zeros((1, 3))))

    def test_augment_columns(self):
        obs, X = exact_observations()
        g = build_graph(obs, PRIOR, MOTION)
        ds = augment(collect_residuals(g, StateTrajectory([[0.0, 0.0, 0.0]])), obs)
        assert ds.names == ["rho", "azimuth_deg", "elevation_deg", "signal_strength_dbhz"]
        assert ds.standardized.shape == (3, 4)
        np.testing.assert_allclose(ds.standardized.mean(axis=0), 0.0, atol=1e-12)

    def test_augment_z_score_value(self):
        obs = [
            Observation(0, "range", 1.0, beacon=b, metadata={"ss": v})
            for b, v in zip(BEACONS, [3.0, 7.0, 5.0])
        ]
        g = build_graph(obs, PRIOR, MOTION)
        ds = augment(collect_residuals(g, StateTrajectory([[0.0, 0.0, 0.0]])), obs)
        # ss column: mean 5, population std sqrt(8/3)
        assert ds.standardized[1, 1] == pytest.approx(2.0 / np.sqrt(8.0 / 3.0))

    def test_augment_constant(self):
        obs = [Observation(0, "range", v, beacon=b, metadata={"ss": 4.0}) for b, v in zip(BEACONS, [1.0, 2.0, 4.0])]
        g = build_graph(obs, PRIOR, MOTION)
        ds = augment(collect_residuals(g, StateTrajectory([[0.0, 0.0, 0.0]])), obs)
        assert ds.constant.tolist() == [False, True]
        assert np.all(ds.standardized[:, 1] == 0.0)

    def test_feature_name_mismatch(self):
        obs, X = exact_observations()
        obs[1] = Observation(0, "range", obs[1].value, beacon=obs[1].beacon, metadata={"other": 1.0})
        g = build_graph(obs, PRIOR, MOTION)
        with pytest.raises(FeatureNameMismatch):
            augment(collect_residuals(g, X), obs)


class TestPartition:
    def test_two_groups(self):
        part = partition_residual_domain([0, 0, 1, 1], np.array([1.0, 2.0, 10.0, 12.0]))
        (a, na, ma), (b, nb, mb) = part
        assert na.mean[0] == 1.5 and na.covariance[0, 0] == 0.5
        assert nb.mean[0] == 11.0 and nb.covariance[0, 0] == 2.0
        assert ma.tolist() == [0, 1] and mb.tolist() == [2, 3]

    def test_single_group_is_global(self):
        r = np.random.default_rng(0).normal(size=(30, 2))
        ((_, noise, members),) = partition_residual_domain(np.zeros(30, dtype=int), r)
        np.testing.assert_allclose(noise.mean, r.mean(axis=0))
        np.testing.assert_allclose(noise.covariance, np.cov(r, rowvar=False))
        assert len(members) == 30

    def test_singleton_merged_into_nearest(self):
        r = np.array([0.0, 1.0, 2.0, 20.0, 21.0, 22.0, 3.0])
        part = partition_residual_domain([0, 0, 0, 1, 1, 1, 2], r)
        assert len(part) == 2
        assert 6 in part[0][2].tolist()

    def test_nothing_survives(self):
        with pytest.raises(EmptyPartition):
            partition_residual_domain([0, 1], np.array([1.0, 2.0]))


class TestUpdateUncertainty:
    def setup_graph(self):
        obs, X = exact_observations()
        return build_graph(obs, PRIOR, MOTION)

    def test_single_component(self):
        g = self.setup_graph()
        noise = NoiseModel([[4.0]])
        n = update_uncertainty(g, [(0, noise, np.arange(3))])
        assert n == 3
        assert all(g.factors[i].noise is noise for i in g.measurement_indices())
        assert g.factors[0].noise.covariance[0, 0] == 100.0**2

    def test_degraded_group(self):
        g = self.setup_graph()
        n = update_uncertainty(g, [(0, NoiseModel([[1.0]]), np.array([0, 1])), (1, NoiseModel([[100.0]]), np.array([2]))])
        meas = g.measurement_indices()
        assert g.factors[meas[2]].noise.covariance[0, 0] == 100.0
        assert n == 1  # factors already at unit covariance are unchanged

    def test_idempotent(self):
        g = self.setup_graph()
        part = [(0, NoiseModel([[4.0]], [1.0]), np.arange(3))]
        assert update_uncertainty(g, part) == 3
        assert update_uncertainty(g, part) == 0

    def test_coverage_gap(self):
        with pytest.raises(CoverageGap):
            update_uncertainty(self.setup_graph(), [(0, NoiseModel([[4.0]]), np.array([0, 1]))])


def scenario(seed=0, deg=None, n_epochs=30):
    return generate(ScenarioConfig(seed=seed, n_epochs=n_epochs, degradation=deg or DegradationConfig()))


class TestRun:
    def test_clean_data_no_penalty(self):
        sc = scenario(1)
        rmse = {}
        for mode in MODES:
            X, trace = run(sc.observations, PipelineConfig(mode=mode))
            rmse[mode] = np.sqrt(np.mean(oracle_error(sc.truth, X) ** 2))
        for mode in MODES:
            assert rmse[mode] <= 2 * rmse["L2"], (mode, rmse)

    def test_l2_single_solve(self):
        _, trace = run(scenario(2).observations, PipelineConfig(mode="L2"))
        assert trace.iterations == [] and trace.converged

    def test_no_metadata_degenerates_to_bce(self):
        deg = DegradationConfig(0.3, 10.0, 5.0, "by_signal_strength")
        obs = strip_metadata(scenario(3, deg).observations)
        Xa, ta = run(obs, PipelineConfig(mode="BCE"))
        Xb, tb = run(obs, PipelineConfig(mode="BCE_AD"))
        np.testing.assert_array_equal(Xa.values, Xb.values)
        da, db = ta.to_dict(), tb.to_dict()
        assert da.pop("mode") == "BCE" and db.pop("mode") == "BCE_AD"
        assert da == db

    def test_tight_cluster_learns_sample_covariance(self):
        # residuals are one tight cluster at a scale the initial model misstates
        sc = scenario(4, n_epochs=60)
        cfg = PipelineConfig(mode="BCE", range_sigma=5.0, max_outer=2, tolerance=0.0)
        X, trace = run(sc.observations, cfg)
        g = make_graph(sc.observations, cfg)
        r = collect_residuals(g, X).residuals[:, 0]
        # with a single group the installed model is the sample variance of the
        # previous iterate's residuals
        hard = np.array(trace.iterations[-1].assignments["range"])
        assert len(set(hard.tolist())) == 1
        learned = np.var(collect_residuals(g, StateTrajectory(trace.iterations[-2].trajectory)).residuals, ddof=1)
        assert abs(learned / np.var(r, ddof=1) - 1.0) < 0.1

    def test_deterministic(self):
        deg = DegradationConfig(0.3, 10.0, 5.0, "by_signal_strength")
        obs = scenario(5, deg).observations
        a = run(obs, PipelineConfig(mode="BCE_AD"))[1].to_dict()
        b = run(obs, PipelineConfig(mode="BCE_AD"))[1].to_dict()
        assert a == b

    def test_trace_records_features(self):
        deg = DegradationConfig(0.3, 10.0, 5.0, "by_signal_strength")
        _, trace = run(scenario(6, deg).observations, PipelineConfig(mode="BCE_AD"))
        rec = trace.iterations[0]
        assert rec.selected["range"][0] == "rho"
        assert set(rec.scores["range"]) == {"rho", "azimuth_deg", "elevation_deg", "signal_strength_dbhz"}
        assert len(rec.assignments["range"]) == 30 * 8

    def test_iteration_cap(self):
        deg = DegradationConfig(0.3, 10.0, 5.0, "random")
        _, trace = run(scenario(7, deg).observations, PipelineConfig(mode="BCE", max_outer=2, tolerance=0.0))
        assert len(trace.iterations) == 2 and not trace.converged

    def test_mm_custom_mixture(self):
        mix = {"range": [{"weight": 0.7, "mean": [0.0], "covariance": [[1.0]]},
                         {"weight": 0.3, "mean": [5.0], "covariance": [[100.0]]}]}
        deg = DegradationConfig(0.3, 10.0, 5.0, "random")
        sc = scenario(8, deg)
        X, trace = run(sc.observations, PipelineConfig(mode="MM", mixture=mix))
        hard = np.array(trace.iterations[0].assignments["all"])
        assert hard[sc.labels].mean() > hard[~sc.labels].mean()

    def test_phase_pairs(self):
        sc = generate(ScenarioConfig(seed=9, n_epochs=10, include_phase=True,
                                     degradation=DegradationConfig(0.3, 10.0, 5.0, "random")))
        _, trace = run(sc.observations, PipelineConfig(mode="BCE"))
        assert trace.iterations[0].selected == {"range_phase": ["rho", "phi"]}

    def test_parse_mode(self):
        assert parse_mode("bce-ad") == "BCE_AD" and parse_mode("l2") == "L2"
        with pytest.raises(ModeConfigMismatch, match="bce-ad"):
            parse_mode("huber")

    def test_requires_ranges(self):
        obs = [Observation(0, "prior", [0.0, 0.0, 0.0])]
        with pytest.raises(ModeConfigMismatch):
            run(obs, PipelineConfig(mode="L2"))

    def test_config_from_nested_dicts(self):
        cfg = PipelineConfig(mode="bce", vb={"truncation": 4}, fs={"n_selected": 2})
        assert cfg.mode == "BCE" and cfg.vb.truncation == 4 and cfg.fs.n_selected == 2
        assert replace(cfg, mode="L2").mode == "L2"
