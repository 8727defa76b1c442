"""One-dimensional grid solver for the stochastic Fokker–Planck equation

    dρ = [−∂x(bρ) + ½∂²x(aρ)] dt − ∂x(γρ) dB,   a = σ² + γ²,

driven by the common-noise path of a Scenario, together with the weak-form residual
and the Gaussian-mollified L² distance between two flows.

Cells are cell-centred with zero-flux walls at x_min and x_max. Each step applies an
explicit Euler–Maruyama transport update in conservative flux form, then an implicit
tridiagonal Fokker–Planck update, then clipping and renormalisation. The implicit update
uses the pathwise diffusion σ² + γ²ΔB²/dt and drift b + ½(ΔB²/dt − 1)γ∂xγ, which restores
the second-order term of the transport flow on each path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.linalg import solve_banded
from scipy.ndimage import convolve1d

from core import (MeasureView, ScenarioMismatchError, SolverError, ValidationError,
                  wasserstein1_1d)
from labconfig import logger

CLIP_BUDGET = 1e-3
MASS_TOL = 1e-12
TRANSPORT_FLUXES = ('central', 'upwind')


# ------------------ Grids and Flows ------------------
@dataclass(frozen=True)
class SpatialGrid:
    x_min: float
    x_max: float
    n_cells: int

    def __post_init__(self):
        if not self.x_max > self.x_min:
            raise ValidationError(f"x_min={self.x_min} must be below x_max={self.x_max}")
        if int(self.n_cells) != self.n_cells or self.n_cells < 8:
            raise ValidationError(f"n_cells must be an integer >= 8, got {self.n_cells}")

    @property
    def dx(self):
        return (self.x_max - self.x_min) / self.n_cells

    @property
    def centers(self):
        return self.x_min + (np.arange(self.n_cells) + 0.5) * self.dx

    def contains(self, lo, hi):
        return self.x_min <= lo and hi <= self.x_max


def gaussian_density(grid, mean=0.0, std=1.0):
    """Normalised N(mean, std²) sampled at the cell centres."""
    x = grid.centers
    rho = np.exp(-0.5 * ((x - mean) / std)**2)
    return rho / (rho.sum() * grid.dx)


def heat_kernel_density(grid, mean, var0, t, diffusivity=1.0):
    """Gaussian initial density after time t under ½·diffusivity·∂²x."""
    return gaussian_density(grid, mean, math.sqrt(var0 + diffusivity * t))


@dataclass(frozen=True)
class GridDensityFlow:
    grid: SpatialGrid
    time_grid: object
    values: np.ndarray
    scenario: object = None
    coeffs: object = None
    clipped: np.ndarray = None
    mass_defect: np.ndarray = None

    def __post_init__(self):
        vals = np.array(self.values, dtype=float, copy=True)
        expected = (self.time_grid.n_nodes, self.grid.n_cells)
        if vals.shape != expected:
            raise ValidationError(f"flow values have shape {vals.shape}, expected {expected}")
        vals.setflags(write=False)
        object.__setattr__(self, 'values', vals)
        for name in ('clipped', 'mass_defect'):
            arr = np.zeros(self.time_grid.n_steps) if getattr(self, name) is None else np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)

    def view(self, k):
        return MeasureView.from_density(self.grid.centers, self.values[k], self.grid.dx)

    def mass(self):
        return self.values.sum(axis=1) * self.grid.dx

    def mean(self):
        return self.values @ self.grid.centers * self.grid.dx


# ------------------ Solver ------------------
def _grid_coefficients(coeffs, t, rho, grid, path):
    x = grid.centers[:, None]
    m = MeasureView.from_density(grid.centers, rho, grid.dx)
    b = coeffs.b(t, m, x, path)[:, 0]
    s = coeffs.sigma(t, m, x, path)[:, 0, 0]
    g = coeffs.gamma(t, m, x, path)[:, 0, 0]
    return b, s, g


def _transport(rho, gamma, dB, dx, flux):
    velocity = gamma * dB
    face = np.zeros(rho.size + 1)
    if flux == 'central':
        face[1:-1] = 0.5 * (velocity[:-1] * rho[:-1] + velocity[1:] * rho[1:])
    else:
        left = velocity[:-1] * rho[:-1]
        right = velocity[1:] * rho[1:]
        face[1:-1] = np.where(0.5 * (velocity[:-1] + velocity[1:]) >= 0, left, right)
    return rho - (face[1:] - face[:-1]) / dx


def fokker_planck_bands(b, a, dx, dt):
    """Banded form of (I − dt·A) for A the conservative discretisation of −∂x(b·) + ½∂²x(a·)."""
    n = b.size
    ab = np.zeros((3, n))
    ab[0, 1:] = -dt * (-0.5 * b[1:] + 0.5 * a[1:] / dx) / dx
    ab[2, :-1] = -dt * (0.5 * b[:-1] + 0.5 * a[:-1] / dx) / dx
    diag = -a / dx**2
    diag[0] = (-0.5 * b[0] - 0.5 * a[0] / dx) / dx
    diag[-1] = (0.5 * b[-1] - 0.5 * a[-1] / dx) / dx
    ab[1] = 1.0 - dt * diag
    return ab


def solve_spde(coeffs, init_density, scenario, grid, transport_flux='central', clip_budget=CLIP_BUDGET):
    if scenario.d != 1 or coeffs.d != 1:
        raise ValidationError("the grid solver is one-dimensional")
    if transport_flux not in TRANSPORT_FLUXES:
        raise ValidationError(f"unknown transport flux {transport_flux!r}")
    rho = np.asarray(init_density, dtype=float).copy()
    if rho.shape != (grid.n_cells,) or np.any(rho < 0) or not np.all(np.isfinite(rho)):
        raise ValidationError("initial density must be finite, nonnegative and match the grid")
    rho /= rho.sum() * grid.dx
    tg = scenario.grid
    dx, dt = grid.dx, tg.dt
    dB = scenario.increments[:, 0]
    B = scenario.B
    values = np.empty((tg.n_nodes, grid.n_cells))
    values[0] = rho
    clipped = np.zeros(tg.n_steps)
    defect = np.zeros(tg.n_steps)
    cfl_steps = 0
    worst_cfl = 0.0
    logger.info(f"solve_spde scenario={scenario.scenario_index} cells={grid.n_cells} steps={tg.n_steps} flux={transport_flux}")
    for k in range(tg.n_steps):
        b, s, g = _grid_coefficients(coeffs, tg.nodes[k], rho, grid, B[:k + 1])
        cfl = float(np.max(np.abs(g))) * abs(dB[k]) / dx
        if cfl > 1.0:
            cfl_steps += 1
            worst_cfl = max(worst_cfl, cfl)
        ratio = dB[k]**2 / dt
        a = s**2 + ratio * g**2
        b = b + 0.5 * (ratio - 1.0) * g * np.gradient(g, dx)
        rho = _transport(rho, g, dB[k], dx, transport_flux)
        rho = solve_banded((1, 1), fokker_planck_bands(b, a, dx, dt), rho)
        if not np.all(np.isfinite(rho)):
            raise SolverError(k, float('inf'))
        negative = rho < 0
        if negative.any():
            clipped[k] = -rho[negative].sum() * dx
            if clipped[k] > clip_budget:
                logger.error(f"solve_spde_abort step={k} clipped={clipped[k]:.3e}")
                raise SolverError(k, clipped[k])
            rho[negative] = 0.0
        mass = rho.sum() * dx
        defect[k] = mass - 1.0
        if negative.any() or abs(defect[k]) > MASS_TOL:
            rho /= mass
        values[k + 1] = rho
    if cfl_steps:
        logger.warning(f"cfl_violation steps={cfl_steps} worst={worst_cfl:.3f}")
    if clipped.any():
        logger.info(f"solve_spde_clipped total={clipped.sum():.3e} max={clipped.max():.3e}")
    return GridDensityFlow(grid=grid, time_grid=tg, values=values, scenario=scenario, coeffs=coeffs,
                           clipped=clipped, mass_defect=defect)


# ------------------ Weak Residual ------------------
def weak_residual(flow, phi, coeffs):
    """R(t_k) = ⟨μ_k,φ⟩ − ⟨μ_0,φ⟩ − Σ_{j<k}⟨μ_j,Lφ⟩dt − Σ_{j<k}⟨μ_j,φ′γ⟩ΔB_j − Σ_{j<k} c_j.

    c_j = ½⟨μ_j, γ∂x(γφ′)⟩(ΔB_j² − dt) is the second-order term of the stochastic integral;
    without it an exact solution leaves an O(√dt) residual whenever γ ≠ 0.
    """
    lo, hi = phi.support_interval()
    if not flow.grid.contains(lo, hi):
        raise ValidationError(f"test function support [{lo}, {hi}] escapes the grid")
    grid = flow.grid
    tg = flow.time_grid
    x = grid.centers[:, None]
    val, grad, hess = phi.evaluate(x)
    d1 = grad[:, 0]
    d2 = hess[:, 0, 0]
    if flow.scenario is not None:
        B = flow.scenario.B
        dB = flow.scenario.increments[:, 0]
        quad = dB**2 - tg.dt
    else:
        B = np.zeros((tg.n_nodes, 1))
        dB = np.zeros(tg.n_steps)
        quad = np.zeros(tg.n_steps)
    pair = flow.values @ val * grid.dx
    generator = np.empty(tg.n_steps)
    transport = np.empty(tg.n_steps)
    second = np.empty(tg.n_steps)
    for k in range(tg.n_steps):
        rho = flow.values[k]
        b, s, g = _grid_coefficients(coeffs, tg.nodes[k], rho, grid, B[:k + 1])
        lphi = b * d1 + 0.5 * (s**2 + g**2) * d2
        generator[k] = rho @ lphi * grid.dx
        transport[k] = rho @ (d1 * g) * grid.dx
        second[k] = 0.5 * rho @ (g * np.gradient(g, grid.dx) * d1 + g**2 * d2) * grid.dx
    residual = np.zeros(tg.n_nodes)
    residual[1:] = pair[1:] - pair[0] - np.cumsum(generator * tg.dt + transport * dB + second * quad)
    return residual


# ------------------ Mollified L² Distance ------------------
def gaussian_weights(delta, dx):
    """Grid samples of G_δ = N(0, δ) times dx, truncated at 8√δ."""
    half = int(math.ceil(8.0 * math.sqrt(delta) / dx))
    offsets = np.arange(-half, half + 1) * dx
    return np.exp(-offsets**2 / (2.0 * delta)) / math.sqrt(2.0 * math.pi * delta) * dx


def mollified_l2(diff, delta, dx):
    z = convolve1d(diff, gaussian_weights(delta, dx), mode='constant', cval=0.0)
    return math.sqrt(float(z @ z) * dx)


def spike_distance_closed_form(delta, h):
    """‖G_δ − G_δ(· − h)‖₂ for G_δ = N(0, δ)."""
    return math.sqrt(2.0 * (4.0 * math.pi * delta)**-0.5 * (1.0 - math.exp(-h**2 / (4.0 * delta))))


def _sup_norms(fn_vals, dx, order):
    total = float(np.max(np.abs(fn_vals)))
    deriv = fn_vals
    for _ in range(order):
        deriv = np.gradient(deriv, dx)
        total += float(np.max(np.abs(deriv)))
    return total


def coefficient_bound(coeffs, flow, k, k_star=1.0):
    """K_t = K*(‖b‖C¹ + ‖a‖C² + ‖γ‖²C² + ‖σ‖²W¹'∞) from grid finite differences."""
    grid = flow.grid
    path = flow.scenario.B[:k + 1] if flow.scenario is not None else np.zeros((k + 1, 1))
    b, s, g = _grid_coefficients(coeffs, flow.time_grid.nodes[k], flow.values[k], grid, path)
    dx = grid.dx
    return k_star * (_sup_norms(b, dx, 1) + _sup_norms(s**2 + g**2, dx, 2)
                     + _sup_norms(g, dx, 2)**2 + _sup_norms(s, dx, 1)**2)


@dataclass(frozen=True)
class MollifiedDistanceReport:
    delta: float
    times: np.ndarray
    distance: np.ndarray
    weight: np.ndarray
    bound: np.ndarray = field(default=None)

    def weighted_ratio(self):
        return self.distance**2 / self.weight

    def is_weighted_monotone(self, tol=1e-2):
        r = self.weighted_ratio()
        return bool(np.all(r[1:] <= r[:-1] * (1.0 + tol) + 1e-300))


def _same_scenario(s1, s2):
    if s1 is None or s2 is None:
        return True
    return (s1.master_seed, s1.scenario_index) == (s2.master_seed, s2.scenario_index) \
        and np.array_equal(s1.increments, s2.increments)


def l2_mollified_distance(flow1, flow2, delta, coeffs=None, k_star=1.0):
    if not delta > 0:
        raise ValidationError(f"delta must be positive, got {delta}")
    if flow1.grid != flow2.grid or flow1.time_grid != flow2.time_grid:
        raise ValidationError("flows live on different grids")
    if not _same_scenario(flow1.scenario, flow2.scenario):
        raise ScenarioMismatchError("flows were driven by different scenarios")
    coeffs = coeffs if coeffs is not None else flow1.coeffs
    tg = flow1.time_grid
    dist = np.array([mollified_l2(flow1.values[k] - flow2.values[k], delta, flow1.grid.dx)
                     for k in range(tg.n_nodes)])
    if coeffs is None:
        bound = np.zeros(tg.n_nodes)
    else:
        bound = np.array([coefficient_bound(coeffs, flow1, k, k_star) for k in range(tg.n_nodes)])
    weight = np.exp(cumulative_trapezoid(2.0 * bound, tg.nodes, initial=0.0))
    logger.info(f"l2_mollified_distance delta={delta} max={dist.max():.3e} y_end={weight[-1]:.3e}")
    return MollifiedDistanceReport(delta=float(delta), times=tg.nodes, distance=dist, weight=weight,
                                   bound=bound)


# ------------------ Superposition ------------------
@dataclass(frozen=True)
class SuperpositionReport:
    times: np.ndarray
    w1: np.ndarray

    @property
    def max_w1(self):
        return float(self.w1.max())


def superposition_check(coeffs, init, scenario, grid, N, stride=1):
    """Solve the grid equation, re-simulate particles against its frozen measure flow
    under the same scenario and compare the conditional marginals node by node."""
    from particle_sde import frozen, simulate_random_coeff

    if init.kind != 'gaussian':
        raise ValidationError("superposition_check needs a gaussian initial law")
    flow = solve_spde(coeffs, gaussian_density(grid, init.location, init.scale), scenario, grid)
    ensemble = simulate_random_coeff(frozen(coeffs, flow), init, scenario, N)
    nodes = range(0, scenario.grid.n_nodes, stride)
    w1 = np.array([wasserstein1_1d(ensemble.view(k), flow.view(k)) for k in nodes])
    logger.info(f"superposition_check scenario={scenario.scenario_index} max_w1={w1.max():.4f}")
    return SuperpositionReport(times=scenario.grid.nodes[::stride], w1=w1)
