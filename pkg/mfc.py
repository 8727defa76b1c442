"""Mean-field control with common noise.

Weak controls are simulated as particle systems whose action α^i_t comes from a control
generator; costs are Monte Carlo estimates. Open-loop controls are turned into
Markovian feedback α̂(t, x, features of μ) by regressing the coefficient targets and
solving a pointwise feasibility problem over the action space.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import ndtr

from core import (MeasureView, NonFiniteStateError, RoxinConditionError, ValidationError,
                  make_scenario)
from labconfig import logger
from mimicking import FeatureMap, KernelRegression
from particle_sde import (ParticleEnsemble, draw_aux_noise, draw_particle_noise, euler_maruyama)

GRID_POINTS = 257
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
PENALTY = 1e6
# refined actions must land strictly inside tol
SEARCH_MARGIN = 0.5


# ------------------ Action Spaces ------------------
@dataclass(frozen=True)
class ActionSpace:
    """interval [low, high], finite set of values, or simplex of weights over values."""
    kind: str
    low: float = -1.0
    high: float = 1.0
    values: tuple = ()

    def __post_init__(self):
        if self.kind == 'interval':
            if not self.high > self.low:
                raise ValidationError("interval action space needs low < high")
        elif self.kind in ('finite', 'simplex'):
            if len(self.values) < 1:
                raise ValidationError(f"{self.kind} action space needs values")
            object.__setattr__(self, 'values', tuple(sorted(float(v) for v in self.values)))
        else:
            raise ValidationError(f"unknown action space {self.kind!r}")

    @property
    def dim(self):
        return len(self.values) if self.kind == 'simplex' else 1

    def candidates(self, n=GRID_POINTS):
        if self.kind == 'interval':
            return np.linspace(self.low, self.high, n)[:, None]
        if self.kind == 'finite':
            return np.asarray(self.values)[:, None]
        return np.eye(len(self.values))

    def project(self, a):
        a = np.asarray(a, dtype=float)
        if self.kind == 'interval':
            return np.clip(a, self.low, self.high)
        if self.kind == 'finite':
            vals = np.asarray(self.values)
            return vals[np.argmin(np.abs(a[..., None] - vals), axis=-1)]
        w = np.clip(a, 0.0, None)
        return w / w.sum(axis=-1, keepdims=True)

    def contains(self, a, tol=1e-12):
        a = np.asarray(a, dtype=float)
        if self.kind == 'interval':
            return bool(np.all((a >= self.low - tol) & (a <= self.high + tol)))
        if self.kind == 'finite':
            return bool(np.all(np.min(np.abs(a[..., None] - np.asarray(self.values)), axis=-1) <= tol))
        return bool(np.all(a >= -tol) and np.allclose(a.sum(axis=-1), 1.0, atol=1e-9))

    def barycenter(self, weights):
        return np.asarray(weights, dtype=float) @ np.asarray(self.values)

    def sample(self, rng, n):
        if self.kind == 'interval':
            return rng.uniform(self.low, self.high, size=(n, 1))
        if self.kind == 'finite':
            return rng.choice(np.asarray(self.values), size=n)[:, None]
        return rng.dirichlet(np.ones(len(self.values)), size=n)


def interval(low, high):
    return ActionSpace('interval', low=low, high=high)


def finite(values):
    return ActionSpace('finite', values=tuple(values))


def simplex(values):
    return ActionSpace('simplex', values=tuple(values))


# ------------------ Problems ------------------
@dataclass(frozen=True)
class ControlProblem:
    """Controlled coefficients b(t,x,m,a), σ(t,x,m,a), γ(t,x,m), costs f(t,x,m,a), g(x,m).

    Actions are arrays of shape (n, action_space.dim); scalar actions keep a trailing axis.
    """
    action_space: ActionSpace
    drift: Callable
    sigma: Callable
    gamma: Callable
    running_cost: Callable
    terminal_cost: Callable
    init: object
    grid: object
    d: int = 1

    def _mat(self, val, n):
        arr = np.asarray(val, dtype=float)
        if arr.ndim == 0:
            arr = arr * np.eye(self.d)
        return np.broadcast_to(arr, (n, self.d, self.d))

    def b(self, t, x, m, a):
        return np.broadcast_to(np.asarray(self.drift(t, x, m, a), dtype=float), (x.shape[0], self.d))

    def sig(self, t, x, m, a):
        return self._mat(self.sigma(t, x, m, a), x.shape[0])

    def gam(self, t, x, m):
        return self._mat(self.gamma(t, x, m), x.shape[0])

    def sigma_sq(self, t, x, m, a):
        s = self.sig(t, x, m, a)
        return np.einsum('nik,njk->nij', s, s)

    def f(self, t, x, m, a):
        return np.broadcast_to(np.asarray(self.running_cost(t, x, m, a), dtype=float), (x.shape[0],))

    def g(self, x, m):
        return np.broadcast_to(np.asarray(self.terminal_cost(x, m), dtype=float), (x.shape[0],))


def lq_problem(grid, init, bound=5.0):
    """dX = α dt + dW + dB, f = α² + x², g = 0, A = [−bound, bound]."""
    return ControlProblem(action_space=interval(-bound, bound),
                          drift=lambda t, x, m, a: a,
                          sigma=lambda t, x, m, a: 1.0,
                          gamma=lambda t, x, m: 1.0,
                          running_cost=lambda t, x, m, a: a[:, 0]**2 + x[:, 0]**2,
                          terminal_cost=lambda x, m: 0.0,
                          init=init, grid=grid)


# ------------------ Control Generators ------------------
@dataclass(frozen=True)
class ControlGenerator:
    """α = rule(t, x, m, path, xi) with xi per-particle N(0, 1) noise of width n_aux."""
    kind: str
    rule: Callable
    n_aux: int = 1


def _per_particle(val, n):
    arr = np.asarray(val, dtype=float)
    if arr.ndim == 0:
        return np.full((n, 1), float(arr))
    return arr.reshape(n, -1)


def deterministic_schedule(schedule):
    return ControlGenerator('deterministic_schedule',
                            lambda t, x, m, path, xi: _per_particle(schedule(t), x.shape[0]), 0)


def feedback(policy):
    return ControlGenerator('feedback',
                            lambda t, x, m, path, xi: _per_particle(policy(t, x, m), x.shape[0]), 0)


def feedback_plus_noise(policy, scale=1.0):
    def rule(t, x, m, path, xi):
        return _per_particle(policy(t, x, m), x.shape[0]) + scale * xi[:, :1]
    return ControlGenerator('feedback_plus_noise', rule, 1)


def relaxed_randomization(probabilities):
    """Pure actions drawn with probabilities(t, x, m) (a K-vector or (n, K) array),
    recorded as one-hot weights."""
    def rule(t, x, m, path, xi):
        p = np.asarray(probabilities(t, x, m), dtype=float)
        p = np.broadcast_to(p, (x.shape[0], p.shape[-1]))
        u = ndtr(xi[:, 0])
        k = (u[:, None] > np.cumsum(p, axis=1)).sum(axis=1)
        k = np.minimum(k, p.shape[1] - 1)
        return np.eye(p.shape[1])[k]
    return ControlGenerator('relaxed_randomization', rule, 1)


@dataclass(frozen=True)
class WeakControlRun:
    ensemble: ParticleEnsemble
    controls: np.ndarray
    generator_kind: str

    @property
    def scenario(self):
        return self.ensemble.scenario


def simulate_control(problem, generator, scenario, N):
    """Euler–Maruyama with actions from the generator; α recorded at all nodes."""
    if N < 2:
        raise ValidationError("need at least 2 particles")
    x0, dW, idx = draw_particle_noise(scenario, problem.init, N)
    grid = scenario.grid
    xi = draw_aux_noise(scenario, N, max(generator.n_aux, 1), grid.n_nodes)
    B = scenario.B
    space = problem.action_space
    controls = np.empty((grid.n_nodes, N, space.dim))

    def act(k, t, x):
        m = MeasureView.from_points(x)
        a = space.project(np.reshape(generator.rule(t, x, m, B[:k + 1], xi[:, k]), (N, space.dim)))
        controls[k] = a
        return m, a

    def step(k, t, x):
        m, a = act(k, t, x)
        return problem.b(t, x, m, a), problem.sig(t, x, m, a), problem.gam(t, x, m)

    states = euler_maruyama(step, x0, dW, scenario)
    act(grid.n_steps, grid.nodes[-1], states[-1])
    ensemble = ParticleEnsemble(scenario=scenario, states=states, dW=dW, w_seeds=idx)
    return WeakControlRun(ensemble=ensemble, controls=controls, generator_kind=generator.kind)


# ------------------ Costs ------------------
@dataclass(frozen=True)
class CostReport:
    J: float
    se: float
    n_scenarios: int
    n_particles: int
    integrable: bool
    per_scenario: np.ndarray


def particle_costs(run, problem):
    grid = run.scenario.grid
    ens = run.ensemble
    running = np.empty((grid.n_nodes, ens.N))
    for k in range(grid.n_nodes):
        x = ens.states[k]
        m = ens.view(k)
        running[k] = problem.f(grid.nodes[k], x, m, run.controls[k])
        if not np.all(np.isfinite(running[k])):
            logger.error(f"cost_non_finite step={k} scenario={run.scenario.scenario_index}")
            raise NonFiniteStateError(k, 'running_cost')
    terminal = problem.g(ens.states[-1], ens.view(grid.n_steps))
    if not np.all(np.isfinite(terminal)):
        raise NonFiniteStateError(grid.n_steps, 'terminal_cost')
    return trapezoid(running, grid.nodes, axis=0) + terminal, trapezoid(np.abs(running), grid.nodes, axis=0)


def evaluate_cost(runs, problem):
    """J = E[∫f dt + g] by trapezoid in time; SE clusters by scenario when M ≥ 2."""
    runs = [runs] if isinstance(runs, WeakControlRun) else list(runs)
    costs = []
    abs_costs = []
    for run in runs:
        c, ac = particle_costs(run, problem)
        costs.append(c)
        abs_costs.append(ac)
    per_scenario = np.array([c.mean() for c in costs])
    pooled = np.concatenate(costs)
    J = float(pooled.mean())
    if len(runs) >= 2:
        se = float(per_scenario.std(ddof=1) / math.sqrt(len(runs)))
    else:
        se = float(pooled.std(ddof=1) / math.sqrt(pooled.size))
    integrable = bool(np.isfinite(np.concatenate(abs_costs).mean()))
    return CostReport(J=J, se=se, n_scenarios=len(runs), n_particles=int(pooled.size),
                      integrable=integrable, per_scenario=per_scenario)


# ------------------ Feasibility Search ------------------
@dataclass(frozen=True)
class Selection:
    actions: np.ndarray
    mismatch: np.ndarray
    cost: np.ndarray
    feasible: np.ndarray


def _mismatch(problem, t, x, m, a, b_target, a_target):
    gap = np.linalg.norm(problem.b(t, x, m, a) - b_target, axis=1)
    if a_target is not None:
        gap = gap + np.linalg.norm(problem.sigma_sq(t, x, m, a) - a_target, axis=(1, 2))
    return gap


def select_action(problem, t, x, m, b_target, a_target=None, f_target=None, tol=1e-3):
    """Pointwise α matching the b (and σσᵀ) targets within tol while minimising f.

    Interval spaces: score f + 10⁶·max(0, mismatch − tol/2) on a 257-point grid, ties to
    the smallest action, then golden-section refinement in the neighbouring cells.
    Finite spaces use the grid alone. Simplex spaces are affine, so the targets'
    own weights are returned by the caller; here the vertex search is exhaustive.
    """
    space = problem.action_space
    x = np.atleast_2d(x)
    n = x.shape[0]
    cands = space.candidates()
    G = cands.shape[0]
    xs = np.repeat(x, G, axis=0)
    As = np.tile(cands, (n, 1))
    bt = np.repeat(b_target, G, axis=0)
    at = None if a_target is None else np.repeat(a_target, G, axis=0)

    def score(points, actions, b_t, a_t):
        mis = _mismatch(problem, t, points, m, actions, b_t, a_t)
        return problem.f(t, points, m, actions) + PENALTY * np.maximum(0.0, mis - SEARCH_MARGIN * tol), mis

    s, _ = score(xs, As, bt, at)
    best = np.argmin(s.reshape(n, G), axis=1)
    actions = cands[best].copy()
    if space.kind == 'interval' and G > 1:
        step = (space.high - space.low) / (G - 1)
        lo = np.clip(actions[:, 0] - step, space.low, space.high)
        hi = np.clip(actions[:, 0] + step, space.low, space.high)
        c = hi - GOLDEN * (hi - lo)
        d = lo + GOLDEN * (hi - lo)
        fc, _ = score(x, c[:, None], b_target, a_target)
        fd, _ = score(x, d[:, None], b_target, a_target)
        for _ in range(40):
            left = fc <= fd
            hi = np.where(left, d, hi)
            lo = np.where(left, lo, c)
            new = np.where(left, hi - GOLDEN * (hi - lo), lo + GOLDEN * (hi - lo))
            fnew, _ = score(x, new[:, None], b_target, a_target)
            c, d, fc, fd = (np.where(left, new, d), np.where(left, c, new),
                            np.where(left, fnew, fd), np.where(left, fc, fnew))
        refined = 0.5 * (lo + hi)
        s_ref, _ = score(x, refined[:, None], b_target, a_target)
        s_grid, _ = score(x, actions, b_target, a_target)
        actions[:, 0] = np.where(s_ref < s_grid, refined, actions[:, 0])
    mis = _mismatch(problem, t, x, m, actions, b_target, a_target)
    cost = problem.f(t, x, m, actions)
    feasible = mis <= tol
    if f_target is not None:
        feasible &= cost <= np.asarray(f_target) + tol
    return Selection(actions=actions, mismatch=mis, cost=cost, feasible=feasible)


# ------------------ Roxin Check ------------------
@dataclass(frozen=True)
class RoxinReport:
    n_checked: int
    violations: tuple

    @property
    def passed(self):
        return not self.violations


def default_roxin_points(problem, n_atoms=200, seed=0):
    rng = np.random.default_rng(seed)
    atoms = problem.init.mean() + rng.standard_normal((n_atoms, problem.d)) * max(problem.init.variance(), 1.0)**0.5
    m = MeasureView.from_points(atoms)
    T = problem.grid.t_end
    return [(t, np.full(problem.d, xv), m) for t in (0.0, 0.5 * T) for xv in (-1.0, 0.0, 1.0)]


def check_roxin(problem, sample_points, n_a_samples=16, seed=0, tol=1e-3):
    """Midpoint witness search for convexity of {(b, σσᵀ, z): z ≥ f(a)}."""
    rng = np.random.default_rng(seed)
    space = problem.action_space
    violations = []
    checked = 0
    for p_idx, (t, x, m) in enumerate(sample_points):
        xs = np.repeat(np.reshape(x, (1, -1)), n_a_samples, axis=0)
        a1 = space.sample(rng, n_a_samples)
        a2 = space.sample(rng, n_a_samples)
        b_mid = 0.5 * (problem.b(t, xs, m, a1) + problem.b(t, xs, m, a2))
        s_mid = 0.5 * (problem.sigma_sq(t, xs, m, a1) + problem.sigma_sq(t, xs, m, a2))
        z_mid = 0.5 * (problem.f(t, xs, m, a1) + problem.f(t, xs, m, a2))
        if space.kind == 'simplex':
            witness = 0.5 * (a1 + a2)
            mis = _mismatch(problem, t, xs, m, witness, b_mid, s_mid)
            ok = (mis <= tol) & (problem.f(t, xs, m, witness) <= z_mid + tol)
        else:
            sel = select_action(problem, t, xs, m, b_mid, s_mid, z_mid, tol)
            ok = sel.feasible
        checked += n_a_samples
        for j in np.flatnonzero(~ok):
            violations.append((p_idx, a1[j].tolist(), a2[j].tolist()))
    if violations:
        logger.warning(f"roxin_violations count={len(violations)} checked={checked}")
    return RoxinReport(n_checked=checked, violations=tuple(violations))


# ------------------ Control Projection ------------------
@dataclass
class MarkovianControl:
    problem: ControlProblem
    feature_map: FeatureMap
    dt: float
    slices: dict
    tol: float
    incidents: int = 0
    queries: int = 0
    match_residuals: list = field(default_factory=list)

    def _slice(self, t):
        k = int(round(t / self.dt))
        return self.slices[min(self.slices, key=lambda j: (abs(j - k), j))]

    def __call__(self, t, x, m):
        feats = self.feature_map(m)
        Q = np.hstack([x, np.broadcast_to(feats, (x.shape[0], feats.size))])
        regs = self._slice(t)
        space = self.problem.action_space
        self.queries += x.shape[0]
        if space.kind == 'simplex':
            w = np.clip(regs['weights'].predict(Q), 0.0, None)
            return w / w.sum(axis=1, keepdims=True)
        b_t = regs['b'].predict(Q)
        a_t = regs['a'].predict(Q).reshape(-1, self.problem.d, self.problem.d)
        a_t = 0.5 * (a_t + np.swapaxes(a_t, 1, 2))
        f_t = regs['f'].predict(Q)[:, 0]
        sel = select_action(self.problem, t, x, m, b_t, a_t, f_t, self.tol)
        misses = int((~sel.feasible).sum())
        if misses:
            self.incidents += misses
        self.match_residuals.append(sel.mismatch)
        return sel.actions

    def generator(self):
        return ControlGenerator('markovian', lambda t, x, m, path, xi: self(t, x, m), 0)

    def feasibility_rate(self):
        if not self.match_residuals:
            return 1.0
        res = np.concatenate(self.match_residuals)
        return float(np.mean(res <= self.tol))


def project_control(runs, problem, feature_map=None, bandwidths=None, stride=1, tol=1e-3,
                    min_samples=100, max_train=2000, seed=0):
    """Regress E[b(α)|x, μ], E[σσᵀ(α)|x, μ], E[f(α)|x, μ] per slice and return α̂."""
    runs = [runs] if isinstance(runs, WeakControlRun) else list(runs)
    feature_map = feature_map if feature_map is not None else FeatureMap()
    grid = runs[0].scenario.grid
    slices = {}
    for k in range(0, grid.n_steps, stride):
        t = grid.nodes[k]
        rows = []
        for run in runs:
            x = run.ensemble.states[k]
            m = run.ensemble.view(k)
            a = run.controls[k]
            feats = np.broadcast_to(feature_map(m), (x.shape[0], feature_map.size))
            rows.append((np.hstack([x, feats]), problem.b(t, x, m, a), problem.sigma_sq(t, x, m, a).reshape(x.shape[0], -1),
                         problem.f(t, x, m, a)[:, None], a))
        X = np.concatenate([r[0] for r in rows])
        if X.shape[0] < min_samples:
            logger.warning(f"project_control_slice_unusable node={k} samples={X.shape[0]}")
            continue
        targets = [np.concatenate([r[j] for r in rows]) for j in range(1, 5)]
        if X.shape[0] > max_train:
            keep = np.sort(np.random.default_rng([seed, k]).choice(X.shape[0], size=max_train, replace=False))
            X = X[keep]
            targets = [tg[keep] for tg in targets]
        slices[k] = {name: KernelRegression(bandwidths).fit(X, tg)
                     for name, tg in zip(('b', 'a', 'f', 'weights'), targets)}
    if not slices:
        raise ValidationError("no time slice has enough samples for control projection")
    logger.info(f"project_control slices={len(slices)} runs={len(runs)}")
    return MarkovianControl(problem=problem, feature_map=feature_map, dt=grid.dt, slices=slices, tol=tol)


# ------------------ Comparison ------------------
@dataclass(frozen=True)
class MfcConfig:
    master_seed: int
    n_scenarios: int = 8
    n_particles: int = 200
    stride: int = 1
    feature_map: FeatureMap = field(default_factory=lambda: FeatureMap(n_moments=2))
    bandwidths: object = None
    check_times: tuple = (0.5, 1.0)
    tol: float = 1e-3


@dataclass(frozen=True)
class MfcComparison:
    open_cost: CostReport
    markov_cost: CostReport
    gap: float
    gap_se: float
    times: np.ndarray
    gaps: dict
    incidents: int
    feasibility_rate: float

    def to_dict(self):
        return dict(J_open=self.open_cost.J, J_markov=self.markov_cost.J, se_open=self.open_cost.se,
                    se_markov=self.markov_cost.se, gap=self.gap, gap_se=self.gap_se,
                    gaps=[dict(functional=name, t=float(t), gap=g, se=se)
                          for name, rows in self.gaps.items() for t, (g, se) in zip(self.times, rows)],
                    incidents=self.incidents, feasibility_rate=self.feasibility_rate)


def _moment_battery(runs, k):
    per = np.array([[r.ensemble.states[k][:, 0].mean(), (r.ensemble.states[k][:, 0]**2).mean(),
                     r.ensemble.states[k][:, 0].mean()**2] for r in runs])
    return per.mean(axis=0), per.std(axis=0, ddof=1) / math.sqrt(len(runs))


def markovianize_and_compare(problem, open_loop, config, roxin_points=None):
    report = check_roxin(problem, roxin_points or default_roxin_points(problem), tol=config.tol)
    if not report.passed:
        logger.error(f"roxin_precheck_failed violations={len(report.violations)}")
        raise RoxinConditionError(f"{len(report.violations)} Roxin violations on the default point battery")
    grid = problem.grid
    scenarios = [make_scenario(config.master_seed, s, grid, problem.d) for s in range(config.n_scenarios)]
    open_runs = [simulate_control(problem, open_loop, sc, config.n_particles) for sc in scenarios]
    control = project_control(open_runs, problem, config.feature_map, config.bandwidths, config.stride,
                              config.tol, seed=config.master_seed)
    markov_runs = [simulate_control(problem, control.generator(), sc, config.n_particles) for sc in scenarios]
    j_open = evaluate_cost(open_runs, problem)
    j_markov = evaluate_cost(markov_runs, problem)
    diff = j_open.per_scenario - j_markov.per_scenario
    gap_se = float(diff.std(ddof=1) / math.sqrt(diff.size)) if diff.size > 1 else float('nan')
    times = np.asarray([t for t in config.check_times if t <= grid.t_end + 1e-12])
    names = ('mean_x', 'mean_x2', 'mean_x_times_mean_mu')
    gaps = {name: [] for name in names}
    for t in times:
        k = grid.index_of(t)
        m1, se1 = _moment_battery(open_runs, k)
        m2, se2 = _moment_battery(markov_runs, k)
        for j, name in enumerate(names):
            gaps[name].append((float(m1[j] - m2[j]), float(math.hypot(se1[j], se2[j]))))
    if control.incidents:
        logger.warning(f"roxin_gap_incidents count={control.incidents} queries={control.queries}")
    logger.info(f"markovianize_and_compare J_open={j_open.J:.4f} J_markov={j_markov.J:.4f} gap_se={gap_se:.4f}")
    return MfcComparison(open_cost=j_open, markov_cost=j_markov, gap=float(diff.mean()), gap_se=gap_se,
                         times=times, gaps=gaps, incidents=control.incidents,
                         feasibility_rate=control.feasibility_rate())
