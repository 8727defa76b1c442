import dataclasses

import numpy as np
import pytest

from core import MeasureView, TimeGrid, ValidationError, dyadic_basis, make_scenario
from mimicking import (FeatureMap, KernelRegression, MimickingConfig, harvest_samples, markovian_projection,
                       psd_chain_defect, psd_sqrt, psd_sqrt_with_clip, randomized_linear_system,
                       run_mimicking_experiment, silverman_bandwidths, simulate_original, tower_residuals)
from particle_sde import gaussian_law


@pytest.fixture(scope='module')
def linear_runs():
    grid = TimeGrid(0.5, 10)
    system = randomized_linear_system(c1=-1.0, c2=0.0, noise=0.5, sigma=1.0, gamma=1.0)
    runs = [simulate_original(system, gaussian_law(0.0, 0.5), make_scenario(5, s, grid), 300, range(10))
            for s in range(4)]
    return grid, runs


def test_kernel_regression_reproduces_constants_and_stays_finite(rng):
    X = rng.normal(size=(200, 2))
    reg = KernelRegression().fit(X, np.full(200, 3.5))
    np.testing.assert_allclose(reg.predict(X[:10]), 3.5, rtol=1e-12)
    far = np.array([[50.0, -50.0]])
    assert reg.outside_hull(far)[0]
    assert np.all(np.isfinite(KernelRegression().fit(X, X[:, 0]).predict(far)))
    with pytest.raises(ValidationError):
        KernelRegression(bandwidths=[0.0, 1.0]).fit(X, X[:, 0])


def test_kernel_regression_tracks_a_smooth_target(rng):
    X = rng.uniform(-2.0, 2.0, size=(3000, 1))
    reg = KernelRegression(bandwidths=0.1).fit(X, np.sin(X[:, 0]))
    q = np.linspace(-1.0, 1.0, 5)[:, None]
    np.testing.assert_allclose(reg.predict(q)[:, 0], np.sin(q[:, 0]), atol=0.02)


def test_silverman_bandwidth_falls_back_for_constant_columns(rng):
    X = np.column_stack([rng.normal(size=100), np.ones(100)])
    h = silverman_bandwidths(X)
    assert h[0] > 0 and h[1] == 1.0


def test_psd_square_roots(rng):
    A = rng.normal(size=(3, 3))
    a = A @ A.T
    root = psd_sqrt(a)
    np.testing.assert_allclose(root @ root, a, atol=1e-10)
    _, clip = psd_sqrt_with_clip(np.diag([1.0, -0.25]))
    assert clip == pytest.approx(0.25)
    with pytest.raises(ValidationError):
        psd_sqrt(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_psd_chain_defect_of_a_valid_split():
    gamma = np.full((4, 1, 1), 0.5)
    ahat = np.full((4, 1, 1), 1.25)
    min_eig, err = psd_chain_defect(ahat, gamma)
    assert min_eig == pytest.approx(1.0)
    assert err < 1e-12


def test_feature_map_appends_basis_pairings(rng):
    m = MeasureView.from_points(rng.normal(size=(100, 1)))
    basis = dyadic_basis(-1.0, 1.0, 3)
    fm = FeatureMap(n_moments=2, basis=basis)
    feats = fm(m)
    assert fm.size == 5 and feats.shape == (5,)
    assert feats[0] == pytest.approx(m.mean()[0])


def test_original_system_records_coefficients_at_harvest_nodes(linear_runs):
    grid, runs = linear_runs
    ensemble, observed = runs[0]
    assert sorted(observed) == list(range(10))
    x, b, a = observed[3]
    np.testing.assert_array_equal(x, ensemble.states[3])
    np.testing.assert_allclose(a, 2.0)
    # the auxiliary noise enters b but not its conditional mean
    assert np.mean(b + x) == pytest.approx(0.0, abs=0.15)


def test_projection_recovers_the_markovian_drift(linear_runs):
    grid, runs = linear_runs
    samples = harvest_samples(runs, FeatureMap(n_moments=2))
    assert len(samples) == 10 and len(samples[4]) == 1200
    projected = markovian_projection(samples, dt=grid.dt)
    feats = projected.slices[4][0].parameters['X'][:, 1:].mean(axis=0)
    bhat, ahat = projected.query(0.2, np.array([[0.5], [-0.5]]), feats)
    np.testing.assert_allclose(bhat[:, 0], [-0.5, 0.5], atol=0.25)
    np.testing.assert_allclose(ahat[:, 0, 0], 2.0, rtol=1e-9)
    assert len(tower_residuals(projected, samples)) == 10


def test_projection_table_layout(linear_runs):
    grid, runs = linear_runs
    projected = markovian_projection(harvest_samples(runs, FeatureMap(n_moments=2)), dt=grid.dt)
    table = projected.to_table(np.linspace(-1.0, 1.0, 5))
    assert table.shape == (10 * 5, 1 + 1 + 2 + 1 + 1)
    np.testing.assert_allclose(table[:5, 0], 0.0)
    np.testing.assert_allclose(table[:, -1], 2.0, rtol=1e-9)


def test_thin_slices_fall_back_to_the_nearest_usable_one(linear_runs):
    grid, runs = linear_runs
    samples = harvest_samples(runs, FeatureMap(n_moments=2))
    thin = samples[5]
    samples[5] = dataclasses.replace(thin, x=thin.x[:50], features=thin.features[:50], b=thin.b[:50],
                                     a=thin.a[:50], scenario_index=thin.scenario_index[:50])
    projected = markovian_projection(samples, dt=grid.dt)
    assert projected.unusable == (5,)
    assert projected.slice_for(5 * grid.dt) is projected.slices[4]
    assert projected.diagnostics['fallbacks'] == 1
    with pytest.raises(ValidationError):
        markovian_projection(samples, mode='anticipating')


def test_classical_projection_ignores_the_measure(linear_runs):
    grid, runs = linear_runs
    samples = harvest_samples(runs, FeatureMap(n_moments=2), mode='classical')
    projected = markovian_projection(samples, mode='classical', dt=grid.dt)
    x = np.array([[0.3]])
    a = projected.query(0.25, x, [0.0, 1.0])
    b = projected.query(0.25, x, [5.0, -3.0])
    np.testing.assert_array_equal(a[0], b[0])


@pytest.mark.slow
def test_markovian_input_is_reproduced():
    config = MimickingConfig(master_seed=1, grid=TimeGrid(0.5, 20), n_scenarios=8, n_particles=200,
                             feature_map=FeatureMap(n_moments=2), check_times=(0.25, 0.5))
    report = run_mimicking_experiment(randomized_linear_system(noise=0.0), gaussian_law(0.0, 0.5), config)
    assert report.matched_w1.shape == (8, 2)
    assert report.matched_w1.mean(axis=0).max() < 0.05
    assert report.pooled_w1.shape == (2,)
    assert set(report.to_dict()['battery']) == {'mean_x', 'mean_x2', 'mean_x_times_mean_mu'}
