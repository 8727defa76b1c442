"""Euler–Maruyama particle systems with shared common noise.

Simulates the conditional McKean–Vlasov SDE
    dX = b(t, μ_t, X) dt + σ(t, μ_t, X) dW + γ(t, μ_t, X) dB
with μ_t replaced by the cross-particle empirical measure of one scenario, the same
scheme for coefficients that read the common-noise history, a discrete Picard solver
and report-only integrability/independence diagnostics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.special import ndtr, stdtr

from core import (COMMON_NOISE_STREAM, MeasureView, NonFiniteStateError, ValidationError,
                  mix64, stream_rng)
from labconfig import logger

AUX_STREAM_SALT = 0xA5A55A5AC3C33C3C


# ------------------ Initial Laws ------------------
INITIAL_LAW_KINDS = ('point', 'gaussian', 'uniform', 'mixture')


@dataclass(frozen=True)
class InitialLaw:
    kind: str
    location: float = 0.0
    scale: float = 1.0
    low: float = 0.0
    high: float = 1.0
    components: tuple = ()
    weights: tuple = ()

    def __post_init__(self):
        if self.kind not in INITIAL_LAW_KINDS:
            raise ValidationError(f"unknown initial law {self.kind!r}")
        if self.kind == 'gaussian' and not self.scale > 0:
            raise ValidationError("gaussian initial law needs a positive scale")
        if self.kind == 'uniform' and not self.high > self.low:
            raise ValidationError("uniform initial law needs low < high")
        if self.kind == 'mixture':
            if not self.components or len(self.components) != len(self.weights):
                raise ValidationError("mixture needs matching components and weights")
            if abs(sum(self.weights) - 1.0) > 1e-12 or min(self.weights) < 0:
                raise ValidationError("mixture weights must be a probability vector")

    def sample(self, rng, d):
        if self.kind == 'point':
            return np.full(d, float(self.location))
        if self.kind == 'gaussian':
            return self.location + self.scale * rng.standard_normal(d)
        if self.kind == 'uniform':
            return rng.uniform(self.low, self.high, size=d)
        j = rng.choice(len(self.components), p=np.asarray(self.weights))
        return self.components[j].sample(rng, d)

    def mean(self):
        if self.kind in ('point', 'gaussian'):
            return float(self.location)
        if self.kind == 'uniform':
            return 0.5 * (self.low + self.high)
        return sum(w * c.mean() for w, c in zip(self.weights, self.components))

    def variance(self):
        if self.kind == 'point':
            return 0.0
        if self.kind == 'gaussian':
            return float(self.scale)**2
        if self.kind == 'uniform':
            return (self.high - self.low)**2 / 12.0
        mu = self.mean()
        return sum(w * (c.variance() + (c.mean() - mu)**2) for w, c in zip(self.weights, self.components))


def point_mass(x0=0.0):
    return InitialLaw('point', location=x0)


def gaussian_law(mean=0.0, std=1.0):
    return InitialLaw('gaussian', location=mean, scale=std)


def uniform_law(low=0.0, high=1.0):
    return InitialLaw('uniform', low=low, high=high)


def mixture_law(components, weights):
    return InitialLaw('mixture', components=tuple(components), weights=tuple(weights))


# ------------------ Coefficient Fields ------------------
def _as_vectors(val, n, d):
    return np.broadcast_to(np.asarray(val, dtype=float), (n, d))


def _as_matrices(val, n, d):
    arr = np.asarray(val, dtype=float)
    if arr.ndim == 0:
        arr = arr * np.eye(d)
    return np.broadcast_to(arr, (n, d, d))


def _zero(t, m, x, path):
    return 0.0


@dataclass(frozen=True)
class CoefficientField:
    """Drift/diffusion triple (b, σ, γ) evaluated as f(t, m, x, path).

    x has shape (n, d), m is a MeasureView and path is the common-noise history B up to
    the current node. Evaluators may return scalars, d-vectors, (d, d) matrices or
    per-point stacks; results are broadcast to (n, d) and (n, d, d).
    """
    family: str
    d: int
    drift_fn: Callable
    sigma_fn: Callable
    gamma_fn: Callable
    params: dict = field(default_factory=dict)
    reads_scenario: bool = False

    def b(self, t, m, x, path):
        return _as_vectors(self.drift_fn(t, m, x, path), x.shape[0], self.d)

    def sigma(self, t, m, x, path):
        return _as_matrices(self.sigma_fn(t, m, x, path), x.shape[0], self.d)

    def gamma(self, t, m, x, path):
        return _as_matrices(self.gamma_fn(t, m, x, path), x.shape[0], self.d)

    def evaluate(self, t, m, x, path):
        return self.b(t, m, x, path), self.sigma(t, m, x, path), self.gamma(t, m, x, path)

    def diffusion_matrix(self, t, m, x, path):
        """a = σσᵀ + γγᵀ per point, shape (n, d, d)."""
        s = self.sigma(t, m, x, path)
        g = self.gamma(t, m, x, path)
        return np.einsum('nik,njk->nij', s, s) + np.einsum('nik,njk->nij', g, g)

    def check_psd(self, t, m, x, path, tol=1e-10):
        a = self.diffusion_matrix(t, m, x, path)
        sym = np.max(np.abs(a - np.swapaxes(a, 1, 2)), initial=0.0)
        low = np.min(np.linalg.eigvalsh(0.5 * (a + np.swapaxes(a, 1, 2))), initial=0.0)
        return sym <= tol and low >= -tol


def from_functions(drift=None, sigma=None, gamma=None, d=1, reads_scenario=False, **params):
    return CoefficientField('custom', d, drift or _zero, sigma or _zero, gamma or _zero,
                            params=params, reads_scenario=reads_scenario)


def affine_mean_field(c0=0.0, c1=0.0, c2=0.0, sigma=0.0, gamma=0.0, d=1):
    """b = c0 + c1·x + c2·mean(m), constant σ and γ."""
    def drift(t, m, x, path):
        return c0 + c1 * x + c2 * m.mean()
    return CoefficientField('affine_mean_field', d, drift, lambda t, m, x, p: sigma,
                            lambda t, m, x, p: gamma,
                            params=dict(c0=c0, c1=c1, c2=c2, sigma=sigma, gamma=gamma))


def local_density(c1=-1.0, kappa=0.5, sigma=0.5, lam=1.0, gamma=0.5, bandwidth=0.2, d=1):
    """Drift and diffusion that read the kernel density of m at the particle location.

    b = c1·x + kappa·ρ_m(x), σ = sigma·sqrt(1 + lam·ρ_m(x)), γ constant.
    """
    def drift(t, m, x, path):
        return c1 * x + kappa * m.kde(x, bandwidth)[:, None]

    def diffusion(t, m, x, path):
        dens = m.kde(x, bandwidth)
        return (sigma * np.sqrt(1.0 + lam * dens))[:, None, None] * np.eye(d)

    return CoefficientField('local_density', d, drift, diffusion, lambda t, m, x, p: gamma,
                            params=dict(c1=c1, kappa=kappa, sigma=sigma, lam=lam, gamma=gamma,
                                        bandwidth=bandwidth))


def scenario_random(c_path=1.0, c1=0.0, sigma=0.0, sigma_path=0.0, gamma=0.0, d=1):
    """Coefficients driven by the current common-noise value B_t.

    b = c1·x + c_path·B_t, σ = (sigma + sigma_path·tanh(B_t))·I, γ constant.
    """
    def drift(t, m, x, path):
        return c1 * x + c_path * path[-1]

    def diffusion(t, m, x, path):
        return np.diag(sigma + sigma_path * np.tanh(path[-1]))

    return CoefficientField('scenario_random', d, drift, diffusion, lambda t, m, x, p: gamma,
                            params=dict(c_path=c_path, c1=c1, sigma=sigma, sigma_path=sigma_path,
                                        gamma=gamma),
                            reads_scenario=True)


def composite(*fields):
    """Drifts add up; σ and γ come from the first field."""
    if not fields:
        raise ValidationError("composite needs at least one field")
    base = fields[0]

    def drift(t, m, x, path):
        return sum(f.b(t, m, x, path) for f in fields)

    return CoefficientField('composite', base.d, drift, base.sigma_fn, base.gamma_fn,
                            params=dict(parts=[f.family for f in fields]),
                            reads_scenario=any(f.reads_scenario for f in fields))


def scaled(field_, drift=1.0, sigma=1.0, gamma=1.0):
    return CoefficientField(field_.family, field_.d,
                            lambda t, m, x, p: drift * field_.b(t, m, x, p),
                            lambda t, m, x, p: sigma * field_.sigma(t, m, x, p),
                            lambda t, m, x, p: gamma * field_.gamma(t, m, x, p),
                            params=dict(field_.params, scale_drift=drift, scale_sigma=sigma,
                                        scale_gamma=gamma),
                            reads_scenario=field_.reads_scenario)


def frozen(field_, flow):
    """Same coefficients with the measure argument read from a precomputed flow.

    flow is anything with view(k) -> MeasureView (a GridDensityFlow or an ensemble);
    the node index is recovered from the length of the history path.
    """
    def pick(fn):
        return lambda t, m, x, path: fn(t, flow.view(len(path) - 1), x, path)
    return CoefficientField(field_.family + '+frozen', field_.d, pick(field_.b), pick(field_.sigma),
                            pick(field_.gamma), params=dict(field_.params),
                            reads_scenario=field_.reads_scenario)


# ------------------ Ensembles ------------------
@dataclass(frozen=True)
class ParticleEnsemble:
    scenario: object
    states: np.ndarray
    dW: np.ndarray
    w_seeds: tuple

    def __post_init__(self):
        for name in ('states', 'dW'):
            arr = np.array(getattr(self, name), dtype=float, copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def N(self):
        return self.states.shape[1]

    @property
    def d(self):
        return self.states.shape[2]

    @property
    def n_nodes(self):
        return self.states.shape[0]

    def view(self, k):
        return MeasureView.from_points(self.states[k])

    def conditional_mean(self):
        return self.states.mean(axis=1)

    def conditional_variance(self):
        return self.states.var(axis=1)


SABOTAGE_MODES = ('frozen_w_increment', 'w_from_common_stream')


def draw_particle_noise(scenario, init, N, particle_indices=None, sabotage=None):
    """Initial states (N, d) and idiosyncratic increments (N, n_steps, d).

    Each particle reads its own stream: X0 first, then the W increments. Sabotage modes
    break the independence of the increments on purpose:

    - 'frozen_w_increment': one draw repeated at every step, so ΔW_k depends on the
      particle's own past.
    - 'w_from_common_stream': after the first step the W increments replay the
      common-noise stream one step late, ΔW_k = ΔB_{k−1}, so they depend on the B history.
    """
    grid = scenario.grid
    d = scenario.d
    idx = tuple(range(N)) if particle_indices is None else tuple(int(i) for i in particle_indices)
    if len(idx) != N:
        raise ValidationError("particle_indices must have one entry per particle")
    if COMMON_NOISE_STREAM in idx:
        raise ValidationError(f"particle index {COMMON_NOISE_STREAM} is reserved for the common noise")
    if sabotage is not None and sabotage not in SABOTAGE_MODES:
        raise ValidationError(f"unknown sabotage mode {sabotage!r}")
    sqrt_dt = math.sqrt(grid.dt)
    replayed = None
    if sabotage == 'w_from_common_stream':
        common = stream_rng(scenario.master_seed, scenario.scenario_index, COMMON_NOISE_STREAM)
        replayed = common.standard_normal((grid.n_steps, d)) * sqrt_dt
        logger.warning(f"sabotage mode={sabotage} scenario={scenario.scenario_index}")
    x0 = np.empty((N, d))
    dW = np.empty((N, grid.n_steps, d))
    for row, i in enumerate(idx):
        rng = stream_rng(scenario.master_seed, scenario.scenario_index, i)
        x0[row] = init.sample(rng, d)
        if sabotage == 'frozen_w_increment':
            dW[row] = rng.standard_normal(d) * sqrt_dt
        elif sabotage == 'w_from_common_stream':
            dW[row, 0] = rng.standard_normal(d) * sqrt_dt
            dW[row, 1:] = replayed[:-1]
        else:
            dW[row] = rng.standard_normal((grid.n_steps, d)) * sqrt_dt
    return x0, dW, idx


def draw_aux_noise(scenario, N, n_aux, n_rows=None):
    """Per-particle auxiliary N(0, 1) draws of shape (N, n_rows, n_aux).

    The streams hang off a salted master seed so they never collide with the W or B
    streams of the same scenario.
    """
    rows = scenario.grid.n_steps if n_rows is None else n_rows
    master = mix64(scenario.master_seed ^ AUX_STREAM_SALT)
    xi = np.empty((N, rows, n_aux))
    for i in range(N):
        xi[i] = stream_rng(master, scenario.scenario_index, i).standard_normal((rows, n_aux))
    return xi


def _check_finite(arr, step, coefficient):
    if not np.all(np.isfinite(arr)):
        logger.error(f"non_finite step={step} coefficient={coefficient}")
        raise NonFiniteStateError(step, coefficient)


def euler_maruyama(step_fn, x0, dW, scenario, on_step=None):
    """Shared explicit Euler–Maruyama kernel.

    step_fn(k, t, x) returns (b, σ, γ) at node k for the states x; the update is
    x + b dt + σ ΔW_k + γ ΔB_k with ΔB shared by every particle.
    """
    grid = scenario.grid
    dt = grid.dt
    dB = scenario.increments
    N, d = x0.shape
    states = np.empty((grid.n_nodes, N, d))
    states[0] = x0
    _check_finite(x0, 0, 'state')
    with np.errstate(over='ignore', invalid='ignore'):
        for k in range(grid.n_steps):
            x = states[k]
            b, s, g = step_fn(k, grid.nodes[k], x)
            _check_finite(b, k, 'drift')
            _check_finite(s, k, 'sigma')
            _check_finite(g, k, 'gamma')
            states[k + 1] = x + b * dt + np.einsum('nij,nj->ni', s, dW[:, k]) + np.einsum('nij,j->ni', g, dB[k])
            _check_finite(states[k + 1], k + 1, 'state')
            if on_step is not None:
                on_step(k, states[k + 1])
    return states


def _mean_field_step(coeffs, scenario):
    B = scenario.B

    def step(k, t, x):
        m = MeasureView.from_points(x)
        return coeffs.evaluate(t, m, x, B[:k + 1])
    return step


def _validate_run(coeffs, scenario, N):
    if N < 2:
        raise ValidationError(f"need at least 2 particles, got {N}")
    if coeffs.d != scenario.d:
        raise ValidationError(f"coefficient dimension {coeffs.d} != scenario dimension {scenario.d}")


def simulate_mckv(coeffs, init, scenario, N, particle_indices=None, sabotage=None):
    _validate_run(coeffs, scenario, N)
    x0, dW, idx = draw_particle_noise(scenario, init, N, particle_indices, sabotage)
    logger.info(f"simulate_mckv scenario={scenario.scenario_index} n={N} steps={scenario.grid.n_steps} family={coeffs.family}")
    states = euler_maruyama(_mean_field_step(coeffs, scenario), x0, dW, scenario)
    return ParticleEnsemble(scenario=scenario, states=states, dW=dW, w_seeds=idx)


def simulate_random_coeff(coeff_process, init, scenario, N, particle_indices=None):
    """Euler–Maruyama for coefficients with ω-dependence through the common noise.

    The measure argument is still the empirical view so that ω-free coefficients give
    exactly the mean-field trajectories.
    """
    _validate_run(coeff_process, scenario, N)
    x0, dW, idx = draw_particle_noise(scenario, init, N, particle_indices)
    logger.info(f"simulate_random_coeff scenario={scenario.scenario_index} n={N} steps={scenario.grid.n_steps}")
    states = euler_maruyama(_mean_field_step(coeff_process, scenario), x0, dW, scenario)
    return ParticleEnsemble(scenario=scenario, states=states, dW=dW, w_seeds=idx)


# ------------------ Picard Iteration ------------------
@dataclass(frozen=True)
class PicardReport:
    deltas: tuple
    iterations: int
    converged: bool

    def ratios(self):
        d = np.asarray(self.deltas)
        with np.errstate(divide='ignore', invalid='ignore'):
            return d[1:] / d[:-1]


def picard_solve(coeffs, init, scenario, tolerance=1e-8, max_iter=50, N=200):
    """Discrete Picard iteration on the Euler grid with frozen noise draws.

    X^(0) ≡ X0 and X^(n+1)_k = X0 + Σ_{j<k} (b dt + σ ΔW_j + γ ΔB_j) evaluated on X^(n).
    Δ_n is the particle average of sup_k |X^(n)_k − X^(n−1)_k|.
    """
    _validate_run(coeffs, scenario, N)
    if max_iter < 1:
        raise ValidationError("max_iter must be >= 1")
    grid = scenario.grid
    x0, dW, idx = draw_particle_noise(scenario, init, N)
    B = scenario.B
    dB = scenario.increments
    current = np.broadcast_to(x0, (grid.n_nodes,) + x0.shape).copy()
    deltas = []
    converged = False
    with np.errstate(over='ignore', invalid='ignore'):
        for it in range(1, max_iter + 1):
            incr = np.empty((grid.n_steps,) + x0.shape)
            for k in range(grid.n_steps):
                x = current[k]
                b, s, g = coeffs.evaluate(grid.nodes[k], MeasureView.from_points(x), x, B[:k + 1])
                incr[k] = b * grid.dt + np.einsum('nij,nj->ni', s, dW[:, k]) + np.einsum('nij,j->ni', g, dB[k])
            nxt = np.empty_like(current)
            nxt[0] = x0
            nxt[1:] = x0 + np.cumsum(incr, axis=0)
            _check_finite(nxt, it, 'picard_iterate')
            gap = np.linalg.norm(nxt - current, axis=2).max(axis=0)
            deltas.append(float(gap.mean()))
            current = nxt
            logger.debug(f"picard iteration={it} delta={deltas[-1]:.3e}")
            if deltas[-1] < tolerance:
                converged = True
                break
    if not converged:
        logger.warning(f"picard_not_converged iterations={len(deltas)} last_delta={deltas[-1]:.3e}")
    report = PicardReport(deltas=tuple(deltas), iterations=len(deltas), converged=converged)
    return ParticleEnsemble(scenario=scenario, states=current, dW=dW, w_seeds=idx), report


# ------------------ Closed-Form References ------------------
def ou_conditional_mean(scenario, kappa=1.0, gamma=1.0, x0_mean=0.0):
    """Euler recursion m_{k+1} = (1 − κ dt) m_k + γ ΔB_k of dm = −κ m dt + γ dB on the stored path."""
    dt = scenario.grid.dt
    dB = scenario.increments[:, 0]
    m = np.empty(scenario.grid.n_nodes)
    m[0] = x0_mean
    for k in range(scenario.grid.n_steps):
        m[k + 1] = (1.0 - kappa * dt) * m[k] + gamma * dB[k]
    return m


def ou_conditional_variance(t, kappa=1.0, sigma=1.0, x0_var=0.0):
    decay = np.exp(-2.0 * kappa * np.asarray(t, dtype=float))
    return x0_var * decay + sigma**2 * (1.0 - decay) / (2.0 * kappa)


OU_CHECK_FRACTIONS = (0.25, 0.5, 1.0)


@dataclass(frozen=True)
class OUBenchmarkReport:
    nodes: tuple
    mean_error: np.ndarray
    mean_tolerance: np.ndarray
    variance_error: np.ndarray

    @property
    def mean_ratio(self):
        return float(np.max(self.mean_error / self.mean_tolerance))

    @property
    def worst_variance(self):
        return float(np.max(self.variance_error))


def ou_benchmark(ensemble, kappa=1.0, sigma=1.0, gamma=1.0, x0_mean=0.0, x0_var=0.0, n_se=3.0,
                 fractions=OU_CHECK_FRACTIONS):
    """Conditional mean and variance of one scenario against the OU closed forms.

    Checked at the nodes nearest to the given fractions of the horizon. The mean error is
    measured against the recursion on the stored B path with tolerance
    n_se·sqrt(v_t/N) + 5·dt; the variance error is relative to v_t.
    """
    if ensemble.states.shape[2] != 1:
        raise ValidationError("OU benchmark is one-dimensional")
    if not kappa > 0:
        raise ValidationError(f"OU benchmark needs kappa > 0, got {kappa}")
    if not fractions or min(fractions) <= 0 or max(fractions) > 1:
        raise ValidationError("check fractions must lie in (0, 1]")
    scenario = ensemble.scenario
    grid = scenario.grid
    span = grid.t_end - grid.t_start
    nodes = tuple(max(1, grid.index_of(grid.t_start + f * span)) for f in fractions)
    idx = np.asarray(nodes)
    t = grid.nodes[idx] - grid.t_start
    N = ensemble.states.shape[1]
    v = ou_conditional_variance(t, kappa, sigma, x0_var)
    if not np.all(v > 0):
        raise ValidationError("OU benchmark needs a positive conditional variance")
    m = ou_conditional_mean(scenario, kappa, gamma, x0_mean)[idx]
    mean_error = np.abs(ensemble.conditional_mean()[idx, 0] - m)
    mean_tolerance = n_se * np.sqrt(v / N) + 5.0 * grid.dt
    variance_error = np.abs(ensemble.conditional_variance()[idx, 0] / v - 1.0)
    logger.debug(f"ou_benchmark scenario={scenario.scenario_index} mean_ratio={np.max(mean_error / mean_tolerance):.3f} "
                 f"variance_error={variance_error.max():.4f}")
    return OUBenchmarkReport(nodes=nodes, mean_error=mean_error, mean_tolerance=mean_tolerance,
                             variance_error=variance_error)


# ------------------ Diagnostics ------------------
@dataclass(frozen=True)
class DiagnosticsReport:
    p: float
    integrability_estimate: float
    node_contributions: np.ndarray
    flagged_nodes: tuple
    checkpoints: tuple
    p_values: np.ndarray

    @property
    def integrability_ok(self):
        return np.isfinite(self.integrability_estimate) and not self.flagged_nodes

    def fraction_below(self, level):
        return float(np.mean(self.p_values < level))


def _pearson(stat, incr):
    s = stat - stat.mean()
    w = incr - incr.mean()
    denom = math.sqrt(float(s @ s) * float(w @ w))
    if denom == 0.0:
        return None
    return float(s @ w) / denom


def _correlation_p_value(stat, incr):
    r = _pearson(stat, incr)
    if r is None:
        return 1.0
    z = r * math.sqrt(stat.size)
    return float(2.0 * ndtr(-abs(z)))


def _small_sample_p_value(stat, incr):
    """Two-sided p-value of the Pearson correlation, Student t with n − 2 degrees of freedom."""
    r = _pearson(stat, incr)
    if r is None:
        return 1.0
    n = stat.size
    if 1.0 - r * r <= 0.0:
        return 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return float(2.0 * stdtr(n - 2, -abs(t)))


def diagnostics(ensemble, coeffs, p=2.0, n_checkpoints=100):
    """Integrability estimate and CLT-based independence tests.

    (i) E∫(|b|^p + |a|^p) dμ_t dt by the trapezoid rule over nodes, flagging nodes whose
    contribution exceeds 10³ times the median. (ii) For checkpoints k, Pearson
    correlation of the F_{t_k}-measurable statistics X_k and (X_k − mean)² with the
    next increment ΔW_k across particles, z = r·√N, two-sided normal p-value. Functionals
    of B are constant within a scenario; common_noise_independence tests them.
    """
    if not p > 1:
        raise ValidationError("diagnostics needs p > 1")
    scenario = ensemble.scenario
    grid = scenario.grid
    B = scenario.B
    contrib = np.empty(grid.n_nodes)
    with np.errstate(over='ignore', invalid='ignore'):
        for k in range(grid.n_nodes):
            x = ensemble.states[k]
            path = B[:k + 1]
            m = ensemble.view(k)
            b = coeffs.b(grid.nodes[k], m, x, path)
            a = coeffs.diffusion_matrix(grid.nodes[k], m, x, path)
            contrib[k] = np.mean(np.linalg.norm(b, axis=1)**p + np.linalg.norm(a, axis=(1, 2))**p)
    estimate = float(trapezoid(contrib, grid.nodes))
    median = float(np.median(contrib))
    flagged = []
    if median > 0:
        flagged = [int(k) for k in np.flatnonzero(~(contrib <= 1e3 * median))]
    elif not np.all(np.isfinite(contrib)):
        flagged = [int(k) for k in np.flatnonzero(~np.isfinite(contrib))]
    if flagged:
        logger.warning(f"integrability_flag nodes={len(flagged)} first={flagged[0]} median={median:.3e}")

    checkpoints = tuple(sorted(set(np.linspace(0, grid.n_steps - 1, n_checkpoints).round().astype(int).tolist())))
    pvals = []
    for k in checkpoints:
        x = ensemble.states[k][:, 0]
        incr = ensemble.dW[:, k, 0]
        pvals.append(_correlation_p_value(x, incr))
        pvals.append(_correlation_p_value((x - x.mean())**2, incr))
    pvals = np.asarray(pvals)
    logger.info(f"diagnostics estimate={estimate:.4e} flagged={len(flagged)} tests={pvals.size} min_p={pvals.min():.3e}")
    return DiagnosticsReport(p=float(p), integrability_estimate=estimate, node_contributions=contrib,
                             flagged_nodes=tuple(flagged), checkpoints=checkpoints, p_values=pvals)


COMMON_NOISE_STATISTICS = ('B', 'integral_B', 'last_dB')


@dataclass(frozen=True)
class IndependenceReport:
    checkpoints: tuple
    statistics: tuple
    p_values: np.ndarray
    n_scenarios: int

    @property
    def min_p(self):
        return float(self.p_values.min())

    def fraction_below(self, level):
        return float(np.mean(self.p_values < level))


def common_noise_independence(ensembles, n_checkpoints=100):
    """Independence of the W increments from the common-noise history, pooled over scenarios.

    A functional of B takes one value per scenario, so the test runs across scenarios: at
    checkpoint k the scenario mean of ΔW_k is correlated with B_{t_k}, ∫_0^{t_k} B ds and
    ΔB_{k−1}. p_values has one row per checkpoint and one column per statistic.
    """
    ensembles = list(ensembles)
    if len(ensembles) < 3:
        raise ValidationError(f"pooled independence test needs at least 3 scenarios, got {len(ensembles)}")
    grid = ensembles[0].scenario.grid
    if any(e.scenario.grid != grid for e in ensembles):
        raise ValidationError("pooled independence test needs one time grid for every scenario")
    indices = [e.scenario.scenario_index for e in ensembles]
    if len(set(indices)) != len(indices):
        raise ValidationError("pooled independence test needs distinct scenarios")
    if grid.n_steps < 2:
        raise ValidationError("pooled independence test needs at least 2 steps")
    B = np.stack([e.scenario.B[:, 0] for e in ensembles])
    dB = np.stack([e.scenario.increments[:, 0] for e in ensembles])
    integral = cumulative_trapezoid(B, grid.nodes, axis=1, initial=0.0)
    w_mean = np.stack([e.dW[:, :, 0].mean(axis=0) for e in ensembles])

    checkpoints = tuple(sorted(set(np.linspace(1, grid.n_steps - 1, n_checkpoints).round().astype(int).tolist())))
    pvals = np.empty((len(checkpoints), len(COMMON_NOISE_STATISTICS)))
    for row, k in enumerate(checkpoints):
        for col, stat in enumerate((B[:, k], integral[:, k], dB[:, k - 1])):
            pvals[row, col] = _small_sample_p_value(stat, w_mean[:, k])
    logger.info(f"common_noise_independence scenarios={len(ensembles)} tests={pvals.size} min_p={pvals.min():.3e}")
    return IndependenceReport(checkpoints=checkpoints, statistics=COMMON_NOISE_STATISTICS,
                              p_values=pvals, n_scenarios=len(ensembles))
