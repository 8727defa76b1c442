import logging

import numpy as np
import pytest
from scipy.integrate import cumulative_trapezoid

from core import NonFiniteStateError, TimeGrid, ValidationError, empirical_from_particles, make_scenario
from particle_sde import (affine_mean_field, common_noise_independence, diagnostics, draw_aux_noise,
                          draw_particle_noise, from_functions, gaussian_law, mixture_law, ou_benchmark,
                          ou_conditional_mean, ou_conditional_variance, picard_solve, point_mass,
                          scenario_random, simulate_mckv, simulate_random_coeff, uniform_law)


def test_zero_coefficients_freeze_every_particle(scenario):
    ens = simulate_mckv(affine_mean_field(), gaussian_law(0.0, 1.0), scenario, 50)
    assert ens.states.shape == (scenario.grid.n_nodes, 50, 1)
    for k in range(ens.n_nodes):
        np.testing.assert_array_equal(ens.states[k], ens.states[0])


def test_common_noise_only_matches_ou_mean_recursion(scenario):
    coeffs = affine_mean_field(c1=-1.0, sigma=0.0, gamma=1.0)
    ens = simulate_mckv(coeffs, point_mass(0.0), scenario, 10)
    # no idiosyncratic noise: every particle follows the conditional mean
    np.testing.assert_array_equal(ens.states[:, 0, 0], ens.states[:, 9, 0])
    expected = ou_conditional_mean(scenario, kappa=1.0, gamma=1.0)
    np.testing.assert_allclose(ens.states[:, 0, 0], expected, rtol=1e-10, atol=1e-12)


def test_ou_conditional_variance_matches_closed_form():
    grid = TimeGrid(1.0, 200)
    sc = make_scenario(99, 0, grid)
    ens = simulate_mckv(affine_mean_field(c1=-1.0, sigma=1.0, gamma=1.0), point_mass(0.0), sc, 4000)
    assert ens.conditional_variance()[-1, 0] == pytest.approx(ou_conditional_variance(1.0), abs=0.05)
    # the common noise moves the mean, not the spread
    assert ens.conditional_mean()[-1, 0] == pytest.approx(ou_conditional_mean(sc)[-1], abs=0.1)


def test_particle_streams_do_not_depend_on_ensemble_size(scenario):
    coeffs = affine_mean_field(c1=-1.0, sigma=1.0, gamma=1.0)
    full = simulate_mckv(coeffs, gaussian_law(0.0, 0.5), scenario, 10)
    part = simulate_mckv(coeffs, gaussian_law(0.0, 0.5), scenario, 4, particle_indices=(2, 3, 4, 5))
    np.testing.assert_array_equal(part.states, full.states[:, 2:6])
    assert part.w_seeds == (2, 3, 4, 5)


def test_same_seed_same_ensemble(grid):
    coeffs = affine_mean_field(c1=-0.5, c2=0.5, sigma=1.0, gamma=0.5)
    a = simulate_mckv(coeffs, gaussian_law(), make_scenario(5, 1, grid), 40)
    b = simulate_mckv(coeffs, gaussian_law(), make_scenario(5, 1, grid), 40)
    np.testing.assert_array_equal(a.states, b.states)


def test_run_validation(scenario):
    coeffs = affine_mean_field(c1=-1.0, sigma=1.0)
    with pytest.raises(ValidationError):
        simulate_mckv(coeffs, point_mass(), scenario, 1)
    with pytest.raises(ValidationError):
        simulate_mckv(coeffs, point_mass(), scenario, 2, particle_indices=(-1, 0))
    with pytest.raises(ValidationError):
        simulate_mckv(coeffs, point_mass(), scenario, 2, sabotage='shuffle')
    with pytest.raises(ValidationError):
        simulate_mckv(affine_mean_field(d=2), point_mass(), scenario, 2)


def test_blow_up_raises_non_finite_state(scenario):
    coeffs = from_functions(drift=lambda t, m, x, p: 1e200 * x**2)
    with pytest.raises(NonFiniteStateError) as info:
        simulate_mckv(coeffs, point_mass(1.0), scenario, 3)
    assert info.value.step >= 1


def test_initial_laws_report_their_moments(rng):
    mix = mixture_law([point_mass(-1.0), point_mass(1.0)], [0.5, 0.5])
    assert mix.mean() == pytest.approx(0.0)
    assert mix.variance() == pytest.approx(1.0)
    assert uniform_law(0.0, 2.0).variance() == pytest.approx(1.0 / 3.0)
    draws = np.array([gaussian_law(2.0, 0.5).sample(rng, 1)[0] for _ in range(4000)])
    assert draws.mean() == pytest.approx(2.0, abs=0.05)
    with pytest.raises(ValidationError):
        mixture_law([point_mass()], [0.7])
    with pytest.raises(ValidationError):
        uniform_law(1.0, 1.0)


def test_aux_noise_is_reproducible_and_separate_from_w(scenario):
    x0, dW, _ = draw_particle_noise(scenario, point_mass(), 5)
    xi = draw_aux_noise(scenario, 5, 2)
    assert xi.shape == (5, scenario.grid.n_steps, 2)
    np.testing.assert_array_equal(xi, draw_aux_noise(scenario, 5, 2))
    assert not np.allclose(xi[:, :, 0] * np.sqrt(scenario.grid.dt), dW[:, :, 0])


def test_scenario_driven_drift_reads_the_path(scenario):
    coeffs = scenario_random(c_path=1.0)
    ens = simulate_random_coeff(coeffs, point_mass(0.0), scenario, 3)
    dt = scenario.grid.dt
    expected = np.concatenate([[0.0], np.cumsum(scenario.B[:-1, 0] * dt)])
    np.testing.assert_allclose(ens.states[:, 1, 0], expected, atol=1e-12)


def test_random_coeff_scheme_reduces_to_mean_field_scheme(scenario):
    coeffs = affine_mean_field(c1=-1.0, c2=0.3, sigma=0.7, gamma=0.4)
    a = simulate_mckv(coeffs, gaussian_law(), scenario, 25)
    b = simulate_random_coeff(coeffs, gaussian_law(), scenario, 25)
    np.testing.assert_array_equal(a.states, b.states)


def test_picard_converges_to_the_euler_solution():
    grid = TimeGrid(0.5, 40)
    sc = make_scenario(2718, 0, grid)
    coeffs = affine_mean_field(c1=-0.5, c2=0.5, sigma=0.5, gamma=0.5)
    ens, report = picard_solve(coeffs, gaussian_law(0.0, 1.0), sc, tolerance=1e-8, max_iter=50, N=100)
    assert report.converged
    assert report.iterations <= grid.n_steps + 1
    assert np.all(np.diff(report.deltas) < 0)
    assert report.ratios().max() <= 0.6
    euler = simulate_mckv(coeffs, gaussian_law(0.0, 1.0), sc, 100)
    np.testing.assert_allclose(ens.states, euler.states, atol=1e-6)


def test_picard_reports_non_convergence(scenario):
    coeffs = affine_mean_field(c1=-0.5, sigma=0.5, gamma=0.5)
    _, report = picard_solve(coeffs, gaussian_law(), scenario, tolerance=0.0, max_iter=2, N=20)
    assert not report.converged
    assert report.iterations == 2
    with pytest.raises(ValidationError):
        picard_solve(coeffs, gaussian_law(), scenario, max_iter=0)


def test_diagnostics_zero_system_is_integrable(scenario):
    ens = simulate_mckv(affine_mean_field(), gaussian_law(), scenario, 20)
    rep = diagnostics(ens, affine_mean_field())
    assert rep.integrability_estimate == 0.0
    assert rep.integrability_ok
    with pytest.raises(ValidationError):
        diagnostics(ens, affine_mean_field(), p=1.0)


def test_independence_tests_flag_a_frozen_w_increment(grid):
    sc = make_scenario(31, 0, grid)
    coeffs = affine_mean_field(c1=-1.0, sigma=1.0, gamma=1.0)
    healthy = diagnostics(simulate_mckv(coeffs, gaussian_law(), sc, 1000), coeffs)
    broken = diagnostics(simulate_mckv(coeffs, gaussian_law(), sc, 1000, sabotage='frozen_w_increment'), coeffs)
    assert healthy.p_values.size == 200
    assert healthy.fraction_below(0.01) < 0.06
    assert broken.fraction_below(0.01) > 0.4
    assert np.isfinite(healthy.integrability_estimate) and not healthy.flagged_nodes


def test_empirical_measure_of_a_node_holds_its_particles(scenario):
    ens = simulate_mckv(affine_mean_field(c1=-1.0, sigma=1.0), gaussian_law(), scenario, 20)
    mu = empirical_from_particles(ens, 7)
    np.testing.assert_array_equal(mu.atoms, ens.states[7])
    np.testing.assert_allclose(mu.weights, 1.0 / 20)
    with pytest.raises(ValidationError):
        empirical_from_particles(ens, scenario.grid.n_nodes)


def _ensembles(master, n_scenarios, grid, N, sabotage=None):
    coeffs = affine_mean_field(c1=-1.0, sigma=1.0, gamma=1.0)
    return [simulate_mckv(coeffs, gaussian_law(), make_scenario(master, s, grid), N, sabotage=sabotage)
            for s in range(n_scenarios)]


def test_w_increments_are_independent_of_the_common_noise_history(grid):
    healthy = common_noise_independence(_ensembles(41, 32, grid, 200))
    assert healthy.statistics == ('B', 'integral_B', 'last_dB')
    assert healthy.p_values.shape == (len(healthy.checkpoints), 3)
    assert healthy.fraction_below(0.01) < 0.06
    assert healthy.min_p > 1e-6


def test_w_replayed_from_the_common_stream_is_caught(grid):
    broken = _ensembles(41, 32, grid, 200, sabotage='w_from_common_stream')
    sc = broken[0].scenario
    np.testing.assert_array_equal(broken[0].dW[5, 1:], sc.increments[:-1])
    report = common_noise_independence(broken)
    assert report.min_p < 1e-6
    assert np.all(report.p_values[:, 2] < 1e-6)
    # within one scenario every particle shares the replayed increments
    assert diagnostics(broken[0], affine_mean_field(c1=-1.0, sigma=1.0, gamma=1.0)).fraction_below(1e-6) == 0.0


def test_sabotaged_draws_are_logged_as_warnings(caplog, scenario):
    with caplog.at_level(logging.WARNING, logger='mckvlab'):
        draw_particle_noise(scenario, point_mass(0.0), 4, sabotage='w_from_common_stream')
    records = [r for r in caplog.records if r.name == 'mckvlab']
    assert [r.levelname for r in records] == ['WARNING']
    assert records[0].getMessage() == f"sabotage mode=w_from_common_stream scenario={scenario.scenario_index}"

def test_pooled_independence_checks_its_inputs(grid):
    ens = _ensembles(3, 3, grid, 5)
    with pytest.raises(ValidationError):
        common_noise_independence(ens[:2])
    with pytest.raises(ValidationError):
        common_noise_independence([ens[0], ens[0], ens[1]])
    other = simulate_mckv(affine_mean_field(), gaussian_law(), make_scenario(3, 5, TimeGrid(1.0, 50)), 5)
    with pytest.raises(ValidationError):
        common_noise_independence(ens[:2] + [other])


def test_ou_benchmark_within_monte_carlo_tolerance():
    grid = TimeGrid(0.5, 50)
    sc = make_scenario(77, 0, grid)
    ens = simulate_mckv(affine_mean_field(c1=-1.0, sigma=1.0, gamma=1.0), point_mass(0.0), sc, 20000)
    report = ou_benchmark(ens, kappa=1.0, sigma=1.0, gamma=1.0)
    assert report.nodes == (12, 25, 50)
    assert report.mean_ratio <= 1.0
    assert report.worst_variance <= 0.05


def test_ou_benchmark_flags_the_wrong_relaxation_rate():
    grid = TimeGrid(1.0, 100)
    sc = make_scenario(78, 0, grid)
    ens = simulate_mckv(affine_mean_field(c1=-2.0, sigma=1.0, gamma=1.0), point_mass(0.0), sc, 5000)
    # v_1 is about 0.25 at kappa = 2 and 0.43 at kappa = 1
    assert ou_benchmark(ens, kappa=1.0).worst_variance > 0.3
    with pytest.raises(ValidationError):
        ou_benchmark(ens, kappa=0.0)
    with pytest.raises(ValidationError):
        ou_benchmark(ens, sigma=0.0)


def test_picard_limit_of_linear_decay_is_the_exponential():
    grid = TimeGrid(1.0, 100)
    sc = make_scenario(5, 0, grid)
    ens, report = picard_solve(affine_mean_field(c1=-1.0), point_mass(1.0), sc, tolerance=1e-12, N=2)
    assert report.converged
    np.testing.assert_array_equal(ens.states[:, 0], ens.states[:, 1])
    assert np.abs(ens.states[:, 0, 0] - np.exp(-grid.nodes)).max() <= grid.dt


def test_picard_zero_system_stops_at_the_first_iteration(scenario):
    _, report = picard_solve(affine_mean_field(), gaussian_law(), scenario, N=20)
    assert report.deltas == (0.0,)
    assert report.iterations == 1
    assert report.converged


def test_picard_contracts_on_a_short_horizon():
    grid = TimeGrid(0.5, 50)
    sc = make_scenario(6, 0, grid)
    _, report = picard_solve(affine_mean_field(c1=-1.0, sigma=0.1), gaussian_law(), sc, N=200)
    assert report.converged
    assert report.iterations >= 3
    # each sweep shrinks the gap by at most t_end
    assert np.all(report.ratios() <= 0.6)


def test_path_integral_drift_against_the_trapezoid_rule(scenario):
    ens = simulate_random_coeff(scenario_random(c_path=1.0), point_mass(0.0), scenario, 2)
    dt = scenario.grid.dt
    B = scenario.B[:, 0]
    reference = cumulative_trapezoid(B, scenario.grid.nodes, initial=0.0)
    # left sums trail the trapezoid by exactly dt·B_t / 2
    np.testing.assert_allclose(ens.states[:, 0, 0] - reference, -0.5 * dt * B, atol=1e-12)
    assert np.abs(ens.states[:, 0, 0] - reference).max() <= dt * np.abs(B).max() + 1e-12


def test_relabelled_particles_give_the_same_empirical_path(scenario):
    coeffs = affine_mean_field(c1=-1.0, c2=0.5, sigma=1.0, gamma=0.5)
    order = (3, 0, 5, 1, 4, 2)
    a = simulate_mckv(coeffs, gaussian_law(), scenario, 6)
    b = simulate_mckv(coeffs, gaussian_law(), scenario, 6, particle_indices=order)
    np.testing.assert_allclose(b.states, a.states[:, list(order)], atol=1e-12)
    np.testing.assert_allclose(np.sort(b.states[:, :, 0], axis=1), np.sort(a.states[:, :, 0], axis=1),
                               atol=1e-12)


def test_pure_common_noise_translates_the_cloud(scenario):
    ens = simulate_mckv(affine_mean_field(gamma=1.0), gaussian_law(0.0, 2.0), scenario, 50)
    expected = ens.states[0][None, :, 0] + scenario.B[:, 0][:, None]
    np.testing.assert_allclose(ens.states[:, :, 0], expected, atol=1e-12)


@pytest.mark.slow
def test_sine_drift_mean_agrees_with_a_ten_times_finer_run():
    coeffs = from_functions(drift=lambda t, m, x, p: np.sin(x), sigma=lambda t, m, x, p: 1.0)
    means, errs = [], []
    for n_steps in (100, 1000):
        sc = make_scenario(8, 0, TimeGrid(1.0, n_steps))
        x_end = simulate_mckv(coeffs, point_mass(1.0), sc, 20000).states[-1, :, 0]
        means.append(x_end.mean())
        errs.append(x_end.std() / np.sqrt(x_end.size))
    assert abs(means[0] - means[1]) <= 3.0 * (errs[0] + errs[1]) + 0.01
