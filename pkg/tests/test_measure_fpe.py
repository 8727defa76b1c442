import numpy as np
import pytest

from core import (MeasureView, NonFiniteStateError, ScenarioMismatchError, TimeGrid, ValidationError,
                  dyadic_basis, make_scenario)
from measure_fpe import (compare_generator_forms, constant_functional, cylindrical_integrand,
                         feature_separation, flat_derivative_quotient, fpe_residual, functional_battery,
                         generator_M, lifted_sde_residual, linear_functional, lions_derivatives,
                         square_functional, stochastic_fubini_check, summarize)
from particle_sde import (affine_mean_field, from_functions, gaussian_law, local_density, point_mass, scaled,
                          simulate_mckv)
from spde_grid import SpatialGrid, gaussian_density


@pytest.fixture
def basis():
    return dyadic_basis(-1.5, 1.5, 3)


@pytest.fixture(scope='module')
def transport_ensembles():
    """100 scenarios of pure common-noise transport, 50 particles each."""
    grid = TimeGrid(0.25, 100)
    coeffs = affine_mean_field(gamma=1.0)
    return coeffs, [simulate_mckv(coeffs, gaussian_law(0.0, 0.5), make_scenario(11, s, grid), 50)
                    for s in range(100)]


@pytest.mark.parametrize('coeffs', [
    affine_mean_field(c0=0.2, c1=-1.0, c2=0.5, sigma=0.7, gamma=0.4),
    local_density(),
])
def test_generator_forms_agree_over_the_battery(basis, rng, coeffs):
    m = MeasureView.from_points(rng.normal(0.0, 0.6, size=(400, 1)))
    for F in functional_battery(basis):
        lhs, rhs, _ = compare_generator_forms(F, 0.3, m, coeffs)
        assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-12), F.functional_id


def test_generator_on_a_density_view(basis):
    space = SpatialGrid(-4.0, 4.0, 400)
    m = MeasureView.from_density(space.centers, gaussian_density(space, 0.2, 0.7), space.dx)
    coeffs = affine_mean_field(c1=-1.0, sigma=1.0, gamma=1.0)
    for F in functional_battery(basis):
        assert generator_M(F, 0.0, m, coeffs) == pytest.approx(cylindrical_integrand(F, 0.0, m, coeffs),
                                                               rel=1e-9, abs=1e-12)


def test_pair_sum_matches_factorized_form(basis, rng):
    m = MeasureView.from_points(rng.normal(size=(500, 1)))
    coeffs = affine_mean_field(c1=-1.0, sigma=0.5, gamma=0.8)
    F = square_functional(basis, 1)
    assert generator_M(F, 0.0, m, coeffs, pair_mode='pairs') == pytest.approx(
        generator_M(F, 0.0, m, coeffs), rel=1e-9, abs=1e-12)
    with pytest.raises(ValidationError):
        generator_M(F, 0.0, m, coeffs, pair_mode='triples')


def test_generator_vanishes_for_zero_coefficients_and_constants(basis, rng):
    m = MeasureView.from_points(rng.normal(size=(100, 1)))
    for F in functional_battery(basis):
        assert generator_M(F, 0.0, m, affine_mean_field()) == 0.0
    coeffs = affine_mean_field(c1=-1.0, sigma=1.0, gamma=1.0)
    assert generator_M(constant_functional(basis, 3.0), 0.0, m, coeffs) == 0.0


def test_generator_reports_non_finite_coefficients(basis, rng):
    m = MeasureView.from_points(rng.normal(size=(20, 1)))
    bad = from_functions(drift=lambda t, m_, x, p: np.where(x > 0, np.inf, 0.0))
    with pytest.raises(NonFiniteStateError):
        generator_M(linear_functional(basis), 0.0, m, bad)


def test_lions_derivative_of_linear_functional(basis):
    weights = np.array([1.0, -2.0, 0.5])
    F = linear_functional(basis, weights)
    m = MeasureView.from_points(np.array([[0.1], [0.4]]))
    v, h = 0.3, 1e-5
    ders = lions_derivatives(F, m, [v], [0.0])

    def flat(y):
        return weights @ basis.evaluate(np.array([[y]]))[0][0]
    assert ders.dm[0] == pytest.approx((flat(v + h) - flat(v - h)) / (2 * h), abs=1e-6)
    np.testing.assert_array_equal(ders.d2m, np.zeros((1, 1)))


def test_flat_derivative_quotient(basis, rng):
    m = MeasureView.from_points(rng.normal(size=(50, 1)))
    m2 = MeasureView.from_points(rng.normal(0.5, 0.5, size=(80, 1)))
    quotient, exact = flat_derivative_quotient(linear_functional(basis), m, m2, 0.5)
    assert quotient == pytest.approx(exact, rel=1e-9, abs=1e-12)
    quotient, exact = flat_derivative_quotient(square_functional(basis, 0), m, m2, 1e-6)
    assert quotient == pytest.approx(exact, rel=1e-4, abs=1e-9)
    with pytest.raises(ValidationError):
        flat_derivative_quotient(linear_functional(basis), m, m2, 0.0)


def test_zero_system_residuals_vanish(basis, grid):
    coeffs = affine_mean_field()
    ensembles = [simulate_mckv(coeffs, gaussian_law(), make_scenario(3, s, grid), 30) for s in range(4)]
    summary = summarize(ensembles, basis, stride=10)
    assert summary.node_indices[-1] == grid.n_steps
    for F in functional_battery(basis):
        rep = fpe_residual(summary, F, coeffs)
        assert np.all(rep.residual == 0.0)
        assert rep.within(3.0, 1e-12)
        assert len(rep.as_records()) == summary.times.size


def test_fpe_residual_is_centred_for_common_noise_transport(basis, transport_ensembles):
    coeffs, ensembles = transport_ensembles
    summary = summarize(ensembles, basis)
    rep = fpe_residual(summary, linear_functional(basis, np.eye(3)[0], 'linear_0'), coeffs)
    assert abs(rep.residual[-1]) <= 4.0 * rep.stderr[-1]


def test_fpe_residual_detects_a_wrong_common_noise_coefficient(basis, transport_ensembles):
    coeffs, ensembles = transport_ensembles
    summary = summarize(ensembles, basis)
    rep = fpe_residual(summary, linear_functional(basis, np.eye(3)[0], 'linear_0'), scaled(coeffs, gamma=2.0))
    assert abs(rep.residual[-1]) >= 5.0 * rep.stderr[-1]


def test_lifted_sde_residual_is_small_pathwise(basis):
    grid = TimeGrid(0.25, 2500)
    coeffs = affine_mean_field(sigma=0.5, gamma=1.0)
    scenarios = [make_scenario(21, s, grid) for s in range(2)]
    summary = summarize([simulate_mckv(coeffs, gaussian_law(0.0, 0.5), sc, 200) for sc in scenarios], basis)
    for i in range(len(basis)):
        assert np.abs(lifted_sde_residual(summary, i, scenarios[1], coeffs)).max() < 0.03
    with pytest.raises(ScenarioMismatchError):
        lifted_sde_residual(summary, 0, make_scenario(21, 5, grid), coeffs)


@pytest.mark.slow
def test_lifted_residual_on_the_ou_particle_flow():
    grid = TimeGrid(1.0, 1000)
    coeffs = affine_mean_field(c1=-1.0, sigma=1.0, gamma=1.0)
    scenarios = [make_scenario(20240601, s, grid) for s in range(2)]
    basis = dyadic_basis(-3.0, 3.0, 3)
    summary = summarize([simulate_mckv(coeffs, point_mass(0.0), sc, 10000) for sc in scenarios], basis)
    for sc in scenarios:
        for i in range(len(basis)):
            assert np.abs(lifted_sde_residual(summary, i, sc, coeffs)).max() < 2e-2


def test_summary_needs_two_scenarios_on_one_grid(basis, grid):
    coeffs = affine_mean_field()
    one = simulate_mckv(coeffs, gaussian_law(), make_scenario(1, 0, grid), 10)
    other = simulate_mckv(coeffs, gaussian_law(), make_scenario(1, 1, TimeGrid(1.0, 50)), 10)
    with pytest.raises(ValidationError):
        summarize([one], basis)
    with pytest.raises(ValidationError):
        summarize([one, other], basis)


def test_stochastic_fubini_identities(grid):
    coeffs = affine_mean_field(c1=-1.0, sigma=1.0, gamma=1.0)
    ens = simulate_mckv(coeffs, gaussian_law(), make_scenario(13, 0, grid), 2000)
    rep = stochastic_fubini_check(ens, 20, 60)
    assert rep.b_gap == pytest.approx(0.0, abs=1e-12)
    assert abs(rep.w_mean) <= 4.0 * rep.w_stderr
    one = stochastic_fubini_check(ens, 20, 60, integrand='one')
    assert one.b_lhs == pytest.approx(ens.scenario.B[60, 0] - ens.scenario.B[20, 0])
    with pytest.raises(ValidationError):
        stochastic_fubini_check(ens, 60, 20)


def test_fubini_b_stderr_is_the_spread_of_the_integrand(grid):
    coeffs = affine_mean_field(c1=-1.0, sigma=1.0, gamma=1.0)
    ens = simulate_mckv(coeffs, gaussian_law(), make_scenario(13, 0, grid), 500)
    rep = stochastic_fubini_check(ens, 20, 60)
    dB = ens.scenario.B[60, 0] - ens.scenario.B[20, 0]
    x_r = ens.states[20][:, 0]
    assert rep.b_stderr == pytest.approx(abs(dB) * x_r.std(ddof=1) / np.sqrt(500), rel=1e-9)
    assert rep.b_gap == pytest.approx(0.0, abs=1e-12)
    one = stochastic_fubini_check(ens, 20, 60, integrand='one')
    # Z·ΔB is the same number for every particle
    assert one.b_stderr == pytest.approx(0.0, abs=1e-12)
    assert one.w_stderr > 0


def test_feature_separation_of_identical_measures(basis, rng):
    m = MeasureView.from_points(rng.normal(size=(100, 1)))
    assert feature_separation(m, m, basis) == (0.0, 0.0)
    shifted = MeasureView.from_points(m.points + 1.0)
    w1, gap = feature_separation(m, shifted, basis)
    assert w1 == pytest.approx(1.0) and gap > 0
