import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from robust_bce.errors import DimensionMismatch, NegativeInput
from robust_bce.model import Factor, FactorGraph, NoiseModel, Observation, StateTrajectory, build_graph
from robust_bce.robust import (
    DcsConfig,
    StaticMixture,
    dcs_weight,
    dcs_weights,
    max_mixture_select,
    solve_dcs,
    solve_max_mixture,
)
from robust_bce.solver import solve

WIDE = StaticMixture([0.9, 0.1], [0.0, 0.0], [1.0, 100.0])


def identity(rows):
    return rows[0].copy(), [np.eye(rows[0].shape[0])]


def location_graph(values, sigma=1.0, prior_sigma=1e6):
    factors = [Factor("prior", (0,), [0.0], NoiseModel([[prior_sigma**2]]))]
    factors += [
        Factor("custom", (0,), [v], NoiseModel([[sigma**2]]), function=identity, measurement=True)
        for v in values
    ]
    return FactorGraph(1, 1, factors)


def range_graph(rng, noise_scale, n_epochs=4, outliers=()):
    beacons = rng.uniform(-100, 100, size=(6, 2))
    truth = np.column_stack([np.cumsum(rng.normal(0, 1, (n_epochs, 2)), axis=0), np.full(n_epochs, 2.0)])
    obs = []
    for e in range(n_epochs):
        for j, b in enumerate(beacons):
            err = rng.normal(0, noise_scale)
            if (e, j) in outliers:
                err += 20.0
            obs.append(Observation(e, "range", np.linalg.norm(truth[e, :2] - b) + truth[e, 2] + err, beacon=b))
    g = build_graph(obs, (np.zeros(3), NoiseModel.diagonal([100.0] * 3)), NoiseModel.diagonal([2.0, 2.0, 2.0]))
    return g, StateTrajectory(np.zeros((n_epochs, 3)))


def dcs_objective(x, values, phi):
    """Sum of ``rho(e^2)`` where ``rho' = dcs_weight``, the cost IRLS with that weight minimises."""
    u = (np.asarray(values)[None, :] - x[:, None]) ** 2
    rho = np.where(u <= phi, u, phi + 2 * phi * np.log((phi + u) / (2 * phi)))
    return rho.sum(axis=1)


class TestDcsWeight:
    @pytest.mark.parametrize("e2,phi,expected", [(0.0, 1.0, 1.0), (1.0, 1.0, 1.0), (2.5, 2.5, 1.0), (3.0, 1.0, 0.5)])
    def test_examples(self, e2, phi, expected):
        assert dcs_weight(e2, phi) == expected

    def test_negative(self):
        with pytest.raises(NegativeInput):
            dcs_weight(-1.0, 1.0)
        with pytest.raises(NegativeInput):
            dcs_weights([1.0, -0.1], 1.0)

    @given(st.floats(0, 1e6), st.floats(0, 1e6), st.floats(1e-3, 1e3))
    def test_bounded_and_non_increasing(self, a, b, phi):
        lo, hi = sorted((a, b))
        wl, wh = dcs_weight(lo, phi), dcs_weight(hi, phi)
        assert 0 < wh <= wl <= 1

    def test_vector_matches_scalar(self):
        e2 = np.linspace(0, 20, 41)
        np.testing.assert_array_equal(dcs_weights(e2, 2.0), [dcs_weight(v, 2.0) for v in e2])

    def test_config_rejects_bad_phi(self):
        with pytest.raises(ValueError):
            DcsConfig(phi=0.0)


class TestSolveDcs:
    def test_location_with_outlier_matches_grid(self):
        values = [0.9, 1.1, 100.0]
        X, rep = solve_dcs(location_graph(values), StateTrajectory([[0.0]]))
        grid = np.linspace(-5, 105, 110001)
        best = grid[np.argmin(dcs_objective(grid, values, 1.0))]
        assert abs(X.values[0, 0] - 1.0) < 0.2
        assert abs(X.values[0, 0] - best) < 2e-3
        assert rep.weights[-1] < 0.01

    def test_clean_data_matches_l2(self):
        # actual noise well inside the modeled sigma keeps every e^2 below phi
        g, X0 = range_graph(np.random.default_rng(1), noise_scale=0.1)
        X_l2, _ = solve(g, X0)
        X_dcs, rep = solve_dcs(g, X0)
        assert np.all(rep.weights == 1.0)
        np.testing.assert_allclose(X_dcs.values, X_l2.values, atol=1e-6)

    def test_prior_only(self):
        g = FactorGraph(1, 1, [Factor("prior", (0,), [3.0], NoiseModel([[1.0]]))])
        X, _ = solve_dcs(g, StateTrajectory([[0.0]]))
        assert X.values[0, 0] == pytest.approx(3.0, abs=1e-12)

    def test_outer_cap(self):
        _, rep = solve_dcs(location_graph([0.0, 1.0, 50.0]), StateTrajectory([[0.0]]), DcsConfig(max_outer=1))
        assert rep.outer_iterations == 1


class TestMaxMixtureSelect:
    def test_single_component(self):
        mix = StaticMixture([1.0], [0.0], [4.0])
        for r in (-30.0, 0.0, 7.0):
            assert max_mixture_select(r, mix)[0] == 0

    def test_narrow_wins_at_zero(self):
        assert max_mixture_select(0.0, WIDE)[0] == 0

    def test_wide_wins_far_out(self):
        idx, noise = max_mixture_select(10.0, WIDE)
        assert idx == 1 and noise.covariance[0, 0] == 100.0

    def test_matches_density_oracle(self):
        def dens(r, w, var):
            return w * np.exp(-0.5 * r * r / var) / np.sqrt(2 * np.pi * var)

        for r in np.linspace(-15, 15, 61):
            expected = int(dens(r, 0.1, 100.0) > dens(r, 0.9, 1.0))
            assert max_mixture_select(r, WIDE)[0] == expected

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            max_mixture_select([0.0, 0.0], WIDE)

    def test_config_round_trip(self):
        mix = StaticMixture.from_config(WIDE.to_config())
        assert mix.to_config() == WIDE.to_config()

    def test_rejects_bad_weights(self):
        with pytest.raises(ValueError):
            StaticMixture([0.5, 0.6], [0.0, 0.0], [1.0, 1.0])


class TestSolveMaxMixture:
    def test_clean_data_all_inliers(self):
        g, X0 = range_graph(np.random.default_rng(2), noise_scale=0.1)
        X_l2, _ = solve(g, X0)
        X_mm, rep = solve_max_mixture(g, X0, WIDE)
        assert set(rep.assignments) == {0}
        np.testing.assert_allclose(X_mm.values, X_l2.values, atol=1e-6)

    def test_outliers_flagged_first_pass(self):
        planted = {(0, 1), (2, 4), (3, 0)}
        g, X0 = range_graph(np.random.default_rng(3), noise_scale=1.0, outliers=planted)
        _, rep = solve_max_mixture(g, X0, WIDE, max_outer=1)
        meas = g.measurement_indices()
        flagged = {(g.factors[i].states[0], k % 6) for k, i in enumerate(meas) if rep.assignments[k] == 1}
        assert planted <= flagged

    def test_fixed_point_before_cap(self):
        g, X0 = range_graph(np.random.default_rng(4), noise_scale=1.0, outliers={(1, 2)})
        _, rep = solve_max_mixture(g, X0, WIDE, max_outer=20)
        assert rep.outer_iterations < 20

    def test_single_component_equals_l2(self):
        g, X0 = range_graph(np.random.default_rng(5), noise_scale=1.0, outliers={(1, 2)})
        X_l2, _ = solve(g, X0)
        X_mm, _ = solve_max_mixture(g, X0, StaticMixture([1.0], [0.0], [1.0]))
        np.testing.assert_array_equal(X_mm.values, X_l2.values)

    def test_input_graph_untouched(self):
        g, X0 = range_graph(np.random.default_rng(6), noise_scale=1.0, outliers={(0, 0)})
        before = [f.noise for f in g.factors]
        solve_max_mixture(g, X0, WIDE)
        assert all(a is f.noise for a, f in zip(before, g.factors))
