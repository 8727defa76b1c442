"""Shared building blocks: errors, RNG streams, time grids, scenarios, test
functions, measures and the one-dimensional Wasserstein distance.

Every other module of the laboratory imports from here. All types are immutable once
built (arrays are flagged read-only) so they can be shared across worker threads.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


# ------------------ Errors ------------------
class LabError(Exception):
    """Base class for every error raised by the laboratory."""


class ValidationError(LabError, ValueError):
    pass


class NonFiniteStateError(LabError):
    def __init__(self, step, coefficient, detail=""):
        self.step = step
        self.coefficient = coefficient
        msg = f"non-finite value at step={step} coefficient={coefficient}"
        super().__init__(f"{msg} {detail}".strip())


class SolverError(LabError):
    def __init__(self, step, clipped):
        self.step = step
        self.clipped = clipped
        super().__init__(f"clipped mass {clipped:.3e} at step={step} exceeds budget")


class ScenarioMismatchError(LabError):
    pass


class ChecksumError(LabError):
    pass


class ConfigError(LabError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")


class RoxinConditionError(LabError):
    pass


def _frozen(arr, dtype=float):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


# ------------------ RNG Streams ------------------
MASK64 = (1 << 64) - 1
# SplitMix64 constants (Steele, Lea, Flood 2014).
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX_MUL_1 = 0xBF58476D1CE4E5B9
MIX_MUL_2 = 0x94D049BB133111EB

# Particle index reserved for the common-noise stream of a scenario.
COMMON_NOISE_STREAM = -1
# Keeps the particle term apart from the scenario term; without it (s, p) and
# (p + 1, s - 1) map to the same stream.
PARTICLE_SALT = 0x5851F42D4C957F2D


def mix64(z):
    z = (int(z) + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * MIX_MUL_1) & MASK64
    z = ((z ^ (z >> 27)) * MIX_MUL_2) & MASK64
    return z ^ (z >> 31)


def stream_seed(master_seed, scenario_index, particle_index=COMMON_NOISE_STREAM):
    """Counter-based seed for one (scenario, particle) stream.

    seed = mix64(master ^ mix64(scenario_index) ^ mix64((particle_index + 1) ^ PARTICLE_SALT));
    the common-noise stream of a scenario uses particle_index = -1.
    """
    if not 0 <= int(master_seed) <= MASK64:
        raise ValidationError(f"master seed must fit in 64 bits, got {master_seed}")
    return mix64((int(master_seed) & MASK64) ^ mix64(scenario_index) ^ mix64((int(particle_index) + 1) ^ PARTICLE_SALT))


def stream_rng(master_seed, scenario_index, particle_index=COMMON_NOISE_STREAM):
    return np.random.Generator(np.random.PCG64(stream_seed(master_seed, scenario_index, particle_index)))


# ------------------ Time Grid and Scenario ------------------
@dataclass(frozen=True)
class TimeGrid:
    t_end: float
    n_steps: int
    t_start: float = 0.0

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValidationError(f"n_steps must be a positive integer, got {self.n_steps}")
        if not self.t_end > self.t_start:
            raise ValidationError(f"t_end={self.t_end} must exceed t_start={self.t_start}")

    @property
    def dt(self):
        return (self.t_end - self.t_start) / self.n_steps

    @property
    def n_nodes(self):
        return self.n_steps + 1

    @cached_property
    def nodes(self):
        return _frozen(self.t_start + self.dt * np.arange(self.n_nodes))

    def index_of(self, t):
        """Nearest node index for time t."""
        k = int(round((t - self.t_start) / self.dt))
        return min(max(k, 0), self.n_steps)


@dataclass(frozen=True)
class Scenario:
    """One common-noise realization: the path B on a time grid and its seed lineage."""
    grid: TimeGrid
    increments: np.ndarray
    master_seed: int
    scenario_index: int

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim != 2 or inc.shape[0] != self.grid.n_steps:
            raise ValidationError(f"increments must have shape (n_steps, d), got {inc.shape}")
        object.__setattr__(self, 'increments', _frozen(inc))

    @property
    def d(self):
        return self.increments.shape[1]

    @property
    def seed(self):
        return stream_seed(self.master_seed, self.scenario_index)

    @cached_property
    def B(self):
        path = np.zeros((self.grid.n_nodes, self.d))
        np.cumsum(self.increments, axis=0, out=path[1:])
        path.setflags(write=False)
        return path

    def history(self, k):
        """B path up to and including node k (the information G_{t_k})."""
        return self.B[:k + 1]


def make_scenario(master_seed, scenario_index, grid, d=1):
    if d < 1:
        raise ValidationError(f"dimension must be >= 1, got {d}")
    if not isinstance(grid, TimeGrid):
        raise ValidationError("grid must be a TimeGrid")
    rng = stream_rng(master_seed, scenario_index, COMMON_NOISE_STREAM)
    draws = rng.standard_normal((grid.n_steps, d))
    return Scenario(grid=grid, increments=draws * math.sqrt(grid.dt),
                    master_seed=int(master_seed), scenario_index=int(scenario_index))


# ------------------ Test Functions ------------------
TEST_FUNCTION_KINDS = ('gaussian_bump', 'polynomial_bump')


def _smoothstep(q):
    h = q**3 * (10.0 - 15.0 * q + 6.0 * q**2)
    dh = 30.0 * q**2 * (1.0 - q)**2
    d2h = 60.0 * q * (1.0 - q) * (1.0 - 2.0 * q)
    return h, dh, d2h


@dataclass(frozen=True)
class TestFunction:
    """Compactly supported C² bump p(u₀)·w(|u|), u = x − center.

    The radial profile w is exp(1 − 1/(1−s)) for gaussian_bump and (1−s)³ for
    polynomial_bump, s = |u|²/r². A positive plateau turns the polynomial profile
    into a quintic smoothstep that equals 1 for |u| ≤ plateau·r, so that φ coincides
    with the polynomial factor there.
    """
    __test__ = False

    kind: str
    center: tuple
    radius: float
    coefficients: tuple = (1.0,)
    plateau: float = 0.0

    def __post_init__(self):
        if self.kind not in TEST_FUNCTION_KINDS:
            raise ValidationError(f"unknown test function kind {self.kind!r}")
        if not self.radius > 0:
            raise ValidationError("radius must be positive")
        if not 0.0 <= self.plateau < 1.0:
            raise ValidationError("plateau must lie in [0, 1)")
        if self.plateau > 0 and self.kind != 'polynomial_bump':
            raise ValidationError("plateau is only defined for polynomial_bump")
        object.__setattr__(self, 'center', tuple(float(c) for c in np.atleast_1d(self.center)))
        object.__setattr__(self, 'coefficients', tuple(float(c) for c in self.coefficients))

    @property
    def d(self):
        return len(self.center)

    def _profile(self, u):
        # Returns (w, A, C) with ∇w = A·u and ∇²w = C·uuᵀ + A·I.
        r = self.radius
        s = np.einsum('ni,ni->n', u, u) / r**2
        w = np.zeros_like(s)
        A = np.zeros_like(s)
        C = np.zeros_like(s)
        if self.kind == 'gaussian_bump':
            inside = s < 1.0 - 1e-3
            one_minus = 1.0 - s[inside]
            g = np.exp(1.0 - 1.0 / one_minus)
            g1 = -g / one_minus**2
            g2 = g * (1.0 / one_minus**4 - 2.0 / one_minus**3)
        elif self.plateau == 0.0:
            inside = s < 1.0
            one_minus = 1.0 - s[inside]
            g = one_minus**3
            g1 = -3.0 * one_minus**2
            g2 = 6.0 * one_minus
        else:
            rho = np.sqrt(s) * r
            r_in = self.plateau * r
            inside = rho < r
            w[inside] = 1.0
            ramp = inside & (rho > r_in)
            span = r - r_in
            h, dh, d2h = _smoothstep((rho[ramp] - r_in) / span)
            w1 = -dh / span
            w2 = -d2h / span**2
            w[ramp] = 1.0 - h
            A[ramp] = w1 / rho[ramp]
            C[ramp] = (w2 - A[ramp]) / rho[ramp]**2
            return w, A, C
        w[inside] = g
        A[inside] = 2.0 * g1 / r**2
        C[inside] = 4.0 * g2 / r**4
        return w, A, C

    def evaluate(self, x):
        """Vectorised (value, gradient, hessian) at points x of shape (n, d)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.d:
            raise ValidationError(f"point dimension {x.shape[1]} != test function dimension {self.d}")
        u = x - np.asarray(self.center)
        w, A, C = self._profile(u)
        coeffs = np.asarray(self.coefficients)
        poly = np.polynomial.polynomial
        p = poly.polyval(u[:, 0], coeffs)
        dp = poly.polyval(u[:, 0], poly.polyder(coeffs)) if len(coeffs) > 1 else np.zeros_like(p)
        d2p = poly.polyval(u[:, 0], poly.polyder(coeffs, 2)) if len(coeffs) > 2 else np.zeros_like(p)

        grad_w = A[:, None] * u
        hess_w = C[:, None, None] * np.einsum('ni,nj->nij', u, u) + A[:, None, None] * np.eye(self.d)
        e0 = np.zeros(self.d)
        e0[0] = 1.0

        value = p * w
        grad = dp[:, None] * w[:, None] * e0 + p[:, None] * grad_w
        cross = np.einsum('i,nj->nij', e0, grad_w)
        hess = (d2p * w)[:, None, None] * np.outer(e0, e0) \
            + dp[:, None, None] * (cross + np.swapaxes(cross, 1, 2)) \
            + p[:, None, None] * hess_w
        return value, grad, hess

    def __call__(self, x):
        return self.evaluate(x)[0]

    def support_interval(self, axis=0):
        return self.center[axis] - self.radius, self.center[axis] + self.radius


def gaussian_bump(center, radius):
    return TestFunction('gaussian_bump', center=center, radius=radius)


def polynomial_bump(center, radius, coefficients=(1.0,), plateau=0.0):
    return TestFunction('polynomial_bump', center=center, radius=radius,
                        coefficients=tuple(coefficients), plateau=plateau)


def eval_test_function(phi, x):
    """(φ(x), ∇φ(x), ∇²φ(x)) at a single point."""
    value, grad, hess = phi.evaluate(np.reshape(np.asarray(x, dtype=float), (1, -1)))
    return float(value[0]), grad[0], hess[0]


@dataclass(frozen=True)
class TestBasis:
    __test__ = False

    functions: tuple

    def __post_init__(self):
        funcs = tuple(self.functions)
        if len(funcs) < 1:
            raise ValidationError("a test basis needs at least one function")
        if len(set(funcs)) != len(funcs):
            raise ValidationError("test basis functions must be pairwise distinct")
        if len({phi.d for phi in funcs}) != 1:
            raise ValidationError("test basis functions must share one dimension")
        object.__setattr__(self, 'functions', funcs)

    def __len__(self):
        return len(self.functions)

    def __getitem__(self, i):
        return self.functions[i]

    def __iter__(self):
        return iter(self.functions)

    @property
    def K(self):
        return len(self.functions)

    def evaluate(self, x):
        """Stacked values (n,K), gradients (n,K,d), hessians (n,K,d,d)."""
        parts = [phi.evaluate(x) for phi in self.functions]
        values = np.stack([p[0] for p in parts], axis=1)
        grads = np.stack([p[1] for p in parts], axis=1)
        hess = np.stack([p[2] for p in parts], axis=1)
        return values, grads, hess


def dyadic_basis(x_min, x_max, n_functions, kind='gaussian_bump'):
    """Lattice of bumps with dyadic radii covering [x_min, x_max] (d = 1).

    Level l holds 2**l bumps of radius (x_max − x_min)/2**l centred on the midpoints
    of the level's cells; levels are filled coarse to fine until n_functions exist.
    """
    if n_functions < 1 or not x_max > x_min:
        raise ValidationError("dyadic basis needs n_functions >= 1 and x_min < x_max")
    length = x_max - x_min
    funcs = []
    level = 0
    while len(funcs) < n_functions:
        count = 2**level
        radius = length / count
        for j in range(count):
            if len(funcs) == n_functions:
                break
            center = x_min + (j + 0.5) * length / count
            funcs.append(TestFunction(kind, center=(center,), radius=radius))
        level += 1
    return TestBasis(tuple(funcs))


# ------------------ Measures ------------------
@dataclass(frozen=True)
class EmpiricalMeasure:
    atoms: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        if atoms.shape[0] < 1:
            raise ValidationError("an empirical measure needs at least one atom")
        if self.weights is None:
            weights = np.full(atoms.shape[0], 1.0 / atoms.shape[0])
        else:
            weights = np.asarray(self.weights, dtype=float)
        if weights.shape != (atoms.shape[0],) or np.any(weights < 0):
            raise ValidationError("weights must be nonnegative, one per atom")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValidationError(f"weights sum to {weights.sum()!r}, expected 1")
        object.__setattr__(self, 'atoms', _frozen(atoms))
        object.__setattr__(self, 'weights', _frozen(weights))

    @property
    def N(self):
        return self.atoms.shape[0]

    @property
    def d(self):
        return self.atoms.shape[1]

    def view(self):
        return MeasureView(self.atoms, self.weights, backing='empirical')


class MeasureView:
    """Uniform read interface over weighted atoms.

    Empirical measures expose their particles, grid densities expose cell centres
    with weights ρ·dx. Coefficient evaluators receive one of these as the measure
    argument m.
    """

    def __init__(self, points, weights, backing='empirical'):
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        self.points = points
        self.weights = np.asarray(weights, dtype=float)
        self.backing = backing

    @classmethod
    def from_points(cls, points):
        points = np.asarray(points, dtype=float)
        n = points.shape[0]
        return cls(points, np.full(n, 1.0 / n), backing='empirical')

    @classmethod
    def from_empirical(cls, measure):
        return measure.view()

    @classmethod
    def from_density(cls, centers, rho, dx):
        return cls(np.asarray(centers, dtype=float)[:, None], np.asarray(rho, dtype=float) * dx,
                   backing='density')

    @property
    def d(self):
        return self.points.shape[1]

    @property
    def mass(self):
        return float(self.weights.sum())

    def pair(self, phi):
        """⟨m, φ⟩ for a TestFunction or any callable mapping (n, d) points to (n, ...)."""
        values = phi(self.points)
        return np.tensordot(self.weights, values, axes=(0, 0))

    def moment(self, k):
        return self.weights @ self.points**k

    def mean(self):
        return self.weights @ self.points

    def covariance(self):
        centred = self.points - self.mean()
        return np.einsum('n,ni,nj->ij', self.weights, centred, centred)

    def kde(self, x, bandwidth):
        """Gaussian kernel density estimate at points x of shape (q, d)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        h = float(bandwidth)
        if h <= 0:
            raise ValidationError("bandwidth must be positive")
        diff = (x[:, None, :] - self.points[None, :, :]) / h
        kern = np.exp(-0.5 * np.einsum('qni,qni->qn', diff, diff)) / (math.sqrt(2 * math.pi) * h)**self.d
        return np.maximum(kern @ self.weights, 0.0)


def lift(m, basis):
    """Feature vector S(m) = (⟨m, φ_1⟩, ..., ⟨m, φ_K⟩)."""
    values = basis.evaluate(m.points)[0]
    return m.weights @ values


def empirical_from_particles(ensemble, time_index):
    states = ensemble.states
    if states.shape[1] == 0:
        raise ValidationError("empty ensemble")
    if not 0 <= time_index < states.shape[0]:
        raise ValidationError(f"time index {time_index} outside grid of {states.shape[0]} nodes")
    return EmpiricalMeasure(states[time_index])


# ------------------ Distances ------------------
def _quantiles(view, levels):
    x = view.points[:, 0]
    order = np.argsort(x, kind='stable')
    xs = x[order]
    cw = np.cumsum(view.weights[order])
    cw /= cw[-1]
    idx = np.searchsorted(cw, levels, side='left')
    return xs[np.minimum(idx, xs.size - 1)]


def wasserstein1_1d(mu, nu, n_quantiles=1000):
    """W₁ between two one-dimensional views via matched quantiles.

    Evaluates both quantile functions at the midpoints (j + ½)/n of n_quantiles
    equal-mass cells and averages the absolute gaps.
    """
    if mu.d != 1 or nu.d != 1:
        raise ValidationError("wasserstein1_1d is defined for one-dimensional measures only")
    if n_quantiles < 2:
        raise ValidationError("n_quantiles must be at least 2")
    levels = (np.arange(n_quantiles) + 0.5) / n_quantiles
    return float(np.mean(np.abs(_quantiles(mu, levels) - _quantiles(nu, levels))))
