import numpy as np
import pytest

from core import MeasureView, ValidationError
from mollify import (CutoffMap, MollifierKernel, c1_bound_check, check_psd_defect, consistency_path,
                     cutoff_projection, smooth_coefficients)
from particle_sde import affine_mean_field, from_functions
from spde_grid import SpatialGrid


@pytest.fixture
def wavy():
    return from_functions(drift=lambda t, m, x, p: np.sin(2.0 * x) - 0.5 * x,
                          sigma=0.3,
                          gamma=lambda t, m, x, p: np.cos(x)[:, :, None])


@pytest.fixture
def mu(rng):
    return MeasureView.from_points(rng.normal(0.0, 1.0, size=(300, 1)))


def test_kernel_is_a_probability_density():
    for n in (1.0, 4.0, 32.0):
        assert MollifierKernel(n).normalization_error() < 1e-9
    with pytest.raises(ValidationError):
        MollifierKernel(0.0)


def test_kernel_derivatives_are_dominated_by_the_kernel():
    kernel = MollifierKernel(8.0)
    r1, r2 = kernel.derivative_domination(np.linspace(-3.0, 3.0, 2001))
    assert r1 <= 1.0 and r2 <= 1.0 + 1e-12
    h = 1e-6
    for x in (-0.2, 0.05, 0.4):
        fd1 = (kernel.value(x + h) - kernel.value(x - h)) / (2 * h)
        fd2 = (kernel.derivative(x + h) - kernel.derivative(x - h)) / (2 * h)
        assert kernel.derivative(x) == pytest.approx(fd1, rel=1e-6)
        assert kernel.second_derivative(x) == pytest.approx(fd2, rel=1e-5)


def test_smoothed_tables_satisfy_jensen_and_keep_mass(wavy, mu):
    grid = SpatialGrid(-6.0, 6.0, 1200)
    tables = smooth_coefficients(wavy, mu, MollifierKernel(8.0), grid)
    assert np.sum(tables.density) * grid.dx == pytest.approx(1.0, abs=1e-12)
    for p in (1.0, 2.0, 4.0):
        assert tables.jensen_gap(p) <= 1e-12
        assert tables.jensen_gap(p, form='diffusion') <= 1e-12
    report = check_psd_defect(tables.a, tables.gamma, ~tables.invalid)
    assert report.min_eigenvalue >= -1e-12
    assert report.passed()


def test_smoothed_drift_obeys_the_c1_bound(wavy, mu):
    kernel = MollifierKernel(8.0)
    tables = smooth_coefficients(wavy, mu, kernel, SpatialGrid(-6.0, 6.0, 1200))
    ok, deriv, bound = c1_bound_check(tables, kernel)
    assert ok and deriv <= bound
    assert np.all(np.isfinite(tables.db))


def test_consistency_error_shrinks_with_the_scale_index():
    atoms = np.linspace(-1.0, 1.0, 401)[:, None]
    mu = MeasureView.from_points(atoms)
    errors = consistency_path(affine_mean_field(c1=-1.0), mu, SpatialGrid(-4.0, 4.0, 2000), ns=(2, 8, 32))
    assert errors[0] > errors[1] > errors[2] > 0


def test_smoothing_rejects_multivariate_measures(rng):
    mu = MeasureView.from_points(rng.normal(size=(10, 2)))
    with pytest.raises(ValidationError):
        smooth_coefficients(affine_mean_field(d=2), mu, MollifierKernel(4.0), SpatialGrid(-3.0, 3.0, 60))


def test_cutoff_map_shape_and_bounds():
    cut = CutoffMap(1.0)
    np.testing.assert_array_equal(cut.chi([0.0, 0.7, -1.0]), 1.0)
    np.testing.assert_array_equal(cut.chi([2.0, -2.5, 10.0]), 0.0)
    assert cut.chi(1.5) == pytest.approx(0.5)
    np.testing.assert_allclose(cut.pi([-0.9, 0.3]), [-0.9, 0.3])
    x = np.linspace(-3.0, 3.0, 6001)
    h = 1e-6
    slope = np.abs(cut.chi(x + h) - cut.chi(x - h)) / (2 * h)
    assert slope.max() <= 1.875 + 1e-6
    np.testing.assert_allclose(cut.jacobian(x), (cut.pi(x + h) - cut.pi(x - h)) / (2 * h), atol=1e-6)
    np.testing.assert_allclose(cut.hessian(x), (cut.jacobian(x + h) - cut.jacobian(x - h)) / (2 * h),
                               atol=1e-4)
    with pytest.raises(ValidationError):
        CutoffMap(-1.0)


def test_cutoff_projection_invariants(wavy, rng):
    mu = MeasureView.from_points(rng.normal(0.0, 1.5, size=(2000, 1)))
    tables = cutoff_projection(wavy, mu, 1.0, 0.05)
    assert tables.mass.sum() == pytest.approx(1.0)
    assert np.all(np.abs(tables.pushforward.points) < 2.0)
    for p in (1.0, 2.0):
        assert tables.jensen_gap(p) <= 1e-12
    assert check_psd_defect(tables.a, tables.gamma, tables.populated).min_eigenvalue >= -1e-12
    b, a, g, valid = tables.lookup(tables.pushforward.points[:, 0])
    assert valid.all() and np.all(np.isfinite(b))
    assert not tables.lookup(np.array([100.0]))[3][0]


def test_cutoff_projection_is_identity_inside_the_plateau(rng):
    mu = MeasureView.from_points(rng.uniform(-0.5, 0.5, size=(500, 1)))
    coeffs = affine_mean_field(c1=-1.0, sigma=0.4, gamma=0.3)
    tables = cutoff_projection(coeffs, mu, 1.0, 0.01)
    np.testing.assert_array_equal(tables.pushforward.points, mu.points)
    np.testing.assert_allclose(tables.a[tables.populated], 0.25)
    np.testing.assert_allclose(tables.gamma[tables.populated], 0.3)


def test_psd_defect_reports_and_validates():
    a = np.stack([2.0 * np.eye(2)] * 3)
    g = np.stack([np.eye(2)] * 3)
    rep = check_psd_defect(a, g)
    assert rep.min_eigenvalue == pytest.approx(1.0) and rep.n_points == 3
    rep = check_psd_defect(np.array([1.0, 0.5]), np.array([0.5, 1.0]))
    assert rep.min_eigenvalue == pytest.approx(-0.5) and rep.argmin == 1 and not rep.passed()
    with pytest.raises(ValidationError):
        check_psd_defect(np.ones(3), np.ones(4))
    with pytest.raises(ValidationError):
        check_psd_defect(np.ones((2, 2)), np.ones((2, 2)))
    with pytest.raises(ValidationError):
        check_psd_defect(np.full(3, np.nan), np.ones(3))
