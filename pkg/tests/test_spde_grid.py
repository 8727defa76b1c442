import numpy as np
import pytest

from core import (Scenario, ScenarioMismatchError, SolverError, TimeGrid, ValidationError, gaussian_bump,
                  make_scenario, wasserstein1_1d)
from particle_sde import (affine_mean_field, gaussian_law, ou_conditional_variance, point_mass, scaled,
                          simulate_mckv)
from spde_grid import (GridDensityFlow, SpatialGrid, gaussian_density, heat_kernel_density,
                       l2_mollified_distance, mollified_l2, solve_spde, spike_distance_closed_form,
                       superposition_check, weak_residual)


@pytest.fixture
def space():
    return SpatialGrid(-6.0, 6.0, 240)


@pytest.fixture
def fine():
    # keeps |γ ΔB| well below the density scale so the transport step stays positive
    return TimeGrid(0.5, 1000)


def _variance(flow, k):
    x = flow.grid.centers
    mean = flow.values[k] @ x * flow.grid.dx
    return flow.values[k] @ x**2 * flow.grid.dx - mean**2


def test_spatial_grid_validation():
    with pytest.raises(ValidationError):
        SpatialGrid(1.0, -1.0, 100)
    with pytest.raises(ValidationError):
        SpatialGrid(-1.0, 1.0, 4)
    grid = SpatialGrid(-1.0, 1.0, 10)
    assert grid.dx == pytest.approx(0.2)
    assert grid.centers[0] == pytest.approx(-0.9)
    assert gaussian_density(grid, 0.0, 0.5).sum() * grid.dx == pytest.approx(1.0)


def test_zero_coefficients_keep_the_initial_density(space, scenario):
    rho0 = gaussian_density(space, 0.0, 0.5)
    flow = solve_spde(affine_mean_field(), rho0, scenario, space)
    for k in (0, 50, scenario.grid.n_steps):
        np.testing.assert_allclose(flow.values[k], rho0, atol=1e-14)
    assert weak_residual(flow, gaussian_bump((0.0,), 1.5), affine_mean_field()).max() == 0.0


def test_mass_stays_one(space, fine):
    scenario = make_scenario(2, 0, fine)
    coeffs = affine_mean_field(c1=-1.0, sigma=1.0, gamma=1.0)
    flow = solve_spde(coeffs, gaussian_density(space, 0.0, 0.5), scenario, space)
    np.testing.assert_allclose(flow.mass(), 1.0, atol=1e-12)
    assert np.all(flow.values >= 0.0)


def test_pure_diffusion_matches_heat_kernel():
    space = SpatialGrid(-5.0, 5.0, 500)
    grid = TimeGrid(0.5, 200)
    sc = make_scenario(3, 0, grid)
    flow = solve_spde(affine_mean_field(sigma=1.0), gaussian_density(space, 0.0, 0.5), sc, space)
    exact = heat_kernel_density(space, 0.0, 0.25, 0.5)
    assert np.abs(flow.values[-1] - exact).sum() * space.dx < 0.01
    assert _variance(flow, grid.n_steps) == pytest.approx(0.75, rel=1e-3)


def test_common_noise_translates_the_density(space):
    grid = TimeGrid(0.25, 2000)
    sc = make_scenario(17, 0, grid)
    flow = solve_spde(affine_mean_field(gamma=1.0), gaussian_density(space, 0.0, 0.5), sc, space)
    np.testing.assert_allclose(flow.mean(), sc.B[:, 0], atol=1e-6)
    # the pathwise diffusion ΔB² cancels the anti-diffusion of the explicit transport step
    assert _variance(flow, grid.n_steps) == pytest.approx(0.25, abs=1e-4)
    residual = weak_residual(flow, gaussian_bump((0.0,), 1.5), affine_mean_field(gamma=1.0))
    assert np.abs(residual).max() < 5e-3


def test_clip_budget_aborts_the_solve():
    space = SpatialGrid(-2.0, 2.0, 40)
    grid = TimeGrid(1e-4, 1)
    sc = Scenario(grid=grid, increments=np.array([[0.5]]), master_seed=0, scenario_index=0)
    rho0 = np.zeros(space.n_cells)
    rho0[15:25] = 1.0
    with pytest.raises(SolverError) as info:
        solve_spde(affine_mean_field(gamma=1.0), rho0, sc, space)
    assert info.value.step == 0
    assert info.value.clipped > 1e-3


def test_solver_input_validation(space, scenario):
    rho0 = gaussian_density(space)
    with pytest.raises(ValidationError):
        solve_spde(affine_mean_field(), -rho0, scenario, space)
    with pytest.raises(ValidationError):
        solve_spde(affine_mean_field(), rho0, scenario, space, transport_flux='lax')
    with pytest.raises(ValidationError):
        solve_spde(affine_mean_field(), rho0[:-1], scenario, space)


def test_weak_residual_rejects_escaping_support(space, scenario):
    flow = solve_spde(affine_mean_field(), gaussian_density(space), scenario, space)
    with pytest.raises(ValidationError):
        weak_residual(flow, gaussian_bump((5.5,), 1.0), affine_mean_field())


def test_mollified_spike_distance_matches_closed_form():
    dx, delta, shift = 0.01, 0.05, 20
    diff = np.zeros(2000)
    diff[1000] = 1.0 / dx
    diff[1000 + shift] -= 1.0 / dx
    got = mollified_l2(diff, delta, dx)
    assert got == pytest.approx(spike_distance_closed_form(delta, shift * dx), rel=1e-3)


def test_mollified_distance_checks_its_inputs(space, fine):
    a = make_scenario(1, 0, fine)
    b = make_scenario(1, 1, fine)
    coeffs = affine_mean_field(c1=-1.0, sigma=1.0, gamma=1.0)
    fa = solve_spde(coeffs, gaussian_density(space), a, space)
    fb = solve_spde(coeffs, gaussian_density(space), b, space)
    with pytest.raises(ScenarioMismatchError):
        l2_mollified_distance(fa, fb, 0.1)
    with pytest.raises(ValidationError):
        l2_mollified_distance(fa, fa, 0.0)
    report = l2_mollified_distance(fa, fa, 0.1)
    assert report.distance.max() == 0.0
    assert report.weight[0] == 1.0 and np.all(np.diff(report.weight) >= 0)


def test_mollified_distance_of_two_initial_laws_is_weighted_monotone(space, fine):
    sc = make_scenario(4, 0, fine)
    coeffs = affine_mean_field(c1=-1.0, sigma=1.0, gamma=0.5)
    f1 = solve_spde(coeffs, gaussian_density(space, -0.5, 0.5), sc, space)
    f2 = solve_spde(coeffs, gaussian_density(space, 0.5, 0.5), sc, space)
    report = l2_mollified_distance(f1, f2, 0.1)
    assert report.distance[0] > 0
    assert report.is_weighted_monotone()


def test_superposition_of_grid_flow_and_particles():
    space = SpatialGrid(-5.0, 5.0, 500)
    grid = TimeGrid(0.5, 500)
    sc = make_scenario(8, 0, grid)
    coeffs = affine_mean_field(c1=-1.0, sigma=1.0, gamma=0.5)
    report = superposition_check(coeffs, gaussian_law(0.0, 0.5), sc, space, 2000, stride=10)
    assert report.w1.size == 51
    assert report.max_w1 < 0.08
    with pytest.raises(ValidationError):
        superposition_check(coeffs, point_mass(), sc, space, 10)


def test_ou_flow_keeps_the_conditional_variance_on_each_path(space):
    sc = make_scenario(5, 0, TimeGrid(1.0, 1000))
    flow = solve_spde(affine_mean_field(c1=-1.0, sigma=1.0, gamma=1.0), gaussian_density(space, 0.0, 0.5), sc, space)
    expected = ou_conditional_variance(1.0, x0_var=0.25)
    assert _variance(flow, sc.grid.n_steps) == pytest.approx(expected, abs=5e-3)


@pytest.mark.slow
def test_heat_flow_residual_is_first_order_in_dt():
    space = SpatialGrid(-6.0, 6.0, 1200)
    phi = gaussian_bump((0.0,), 1.5)
    coeffs = affine_mean_field(sigma=1.0)
    sups = []
    for n_steps in (250, 500, 1000):
        tg = TimeGrid(1.0, n_steps)
        values = np.array([heat_kernel_density(space, 0.0, 0.25, t) for t in tg.nodes])
        sups.append(np.abs(weak_residual(GridDensityFlow(space, tg, values), phi, coeffs)).max())
    assert sups[-1] < 5e-3
    for coarse, fine in zip(sups, sups[1:]):
        assert 1.5 <= coarse / fine <= 3.0


@pytest.mark.slow
def test_doubled_drift_inflates_the_residual():
    space = SpatialGrid(-6.0, 6.0, 1200)
    sc = make_scenario(12, 0, TimeGrid(1.0, 1000))
    coeffs = affine_mean_field(c1=-1.0, sigma=1.0, gamma=1.0)
    flow = solve_spde(coeffs, gaussian_density(space, 0.5, 0.5), sc, space)
    phi = gaussian_bump((0.5,), 2.0)
    honest = np.abs(weak_residual(flow, phi, coeffs)).max()
    doubled = np.abs(weak_residual(flow, phi, scaled(coeffs, drift=2.0))).max()
    assert honest < 5e-3
    assert doubled > 10.0 * honest


@pytest.mark.slow
def test_particles_and_grid_agree_on_the_ou_benchmark():
    coeffs = affine_mean_field(c1=-1.0, sigma=1.0, gamma=1.0)
    levels = ((2500, 600, 500), (10000, 1200, 1000))
    w1 = np.empty((len(levels), 8))
    for row, (N, n_cells, n_steps) in enumerate(levels):
        space = SpatialGrid(-6.0, 6.0, n_cells)
        for s in range(w1.shape[1]):
            sc = make_scenario(20240601, s, TimeGrid(1.0, n_steps))
            ens = simulate_mckv(coeffs, gaussian_law(0.0, 0.5), sc, N)
            flow = solve_spde(coeffs, gaussian_density(space, 0.0, 0.5), sc, space)
            w1[row, s] = wasserstein1_1d(ens.view(n_steps), flow.view(n_steps))
    assert w1[1].max() <= 0.02
    # quadrupling N with dx and dt halved shrinks the mean distance
    assert w1[1].mean() < w1[0].mean()
