"""Experiment definitions and the pipelines behind `app.py run`.

A definition is a flat INI file. parse_config turns it into an ExperimentConfig or
raises ConfigError with the offending line and column; run_experiment executes the
named pipeline, writes artifacts through an ArtifactStore and returns the gate
outcomes. Scenario-level work goes to a thread pool sized by MCKV_WORKERS; results are
reassembled in scenario order, so outputs do not depend on the worker count.
"""
from __future__ import annotations

import configparser
import inspect
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from core import (ConfigError, MeasureView, RoxinConditionError, TimeGrid, ValidationError,
                  dyadic_basis, make_scenario, stream_rng, wasserstein1_1d)
from labconfig import logger, worker_count
from measure_fpe import fpe_residual, functional_battery, summarize
from mfc import MfcConfig, feedback_plus_noise, lq_problem, markovianize_and_compare
from mimicking import FeatureMap, MimickingConfig, randomized_linear_system, run_mimicking_experiment
from mollify import (MollifierKernel, c1_bound_check, check_psd_defect, consistency_path,
                     cutoff_projection, smooth_coefficients)
from particle_sde import (InitialLaw, affine_mean_field, from_functions, local_density, ou_benchmark,
                          picard_solve, scaled, scenario_random, simulate_mckv)
from persistence import (ArtifactStore, save_density_flow, save_ensemble, save_feature_trajectories,
                         save_json, save_mollified_tables, save_projection_table, save_residual_path,
                         save_scenario)
from spde_grid import SpatialGrid, gaussian_density, solve_spde, weak_residual

EXPERIMENT_KINDS = ('hierarchy_check', 'mimicking', 'mfc_compare', 'mollify_suite', 'picard')


def _zero_field():
    return affine_mean_field()


def _ou_field(kappa=1.0, sigma=1.0, gamma=1.0):
    return affine_mean_field(c1=-kappa, sigma=sigma, gamma=gamma)


SYSTEM_FAMILIES = {
    'zero': _zero_field,
    'ou': _ou_field,
    'affine_mean_field': affine_mean_field,
    'local_density': local_density,
    'scenario_random': scenario_random,
}

GATE_DEFAULTS = {
    'n_se': 3.0,
    'fpe_slack': 1e-12,
    'sabotage_n_se': 10.0,
    'weak_residual': 5e-3,
    'cross_level_w1': 0.02,
    'idempotence_w1': 0.01,
    'picard_ratio': 0.6,
    'mfc_gap_slack': 0.05,
    'jensen_slack': 1e-6,
    'psd_floor': -1e-8,
    'ou_variance': 0.05,
}

HIERARCHY_INIT_KINDS = ('point', 'gaussian')

SECTION_DEFAULTS = {
    'hierarchy': {'n_functions': '3', 'stride': '10', 'sabotage_check': 'no', 'save_stride': '10'},
    'mimicking': {'c1': '-1.0', 'c2': '0.0', 'noise': '0.5', 'sigma': '1.0', 'gamma': '1.0', 'stride': '1',
                  'mode': 'conditional', 'n_moments': '4', 'max_train': '2000', 'idempotence': 'yes',
                  'check_times': '0.25, 0.5, 1.0'},
    'mfc': {'bound': '5.0', 'gain': '1.0', 'noise': '0.5', 'stride': '1', 'tol': '1e-3', 'n_moments': '2',
            'check_times': '0.5, 1.0'},
    'mollify': {'n_draws': '50', 'scales': '4, 16, 64', 'n_atoms': '200', 'radius': '2.0'},
    'picard': {'tolerance': '1e-8', 'max_iter': '50'},
}


# ------------------ Config ------------------
@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    seed: int
    n_particles: int
    n_scenarios: int
    output_dir: str
    time_grid: TimeGrid
    space: SpatialGrid = None
    family: str = 'zero'
    system_params: dict = field(default_factory=dict)
    init: InitialLaw = None
    gates: dict = field(default_factory=dict)
    sections: dict = field(default_factory=dict)
    text: str = ''
    name: str = ''

    def gate(self, name):
        return self.gates.get(name, GATE_DEFAULTS[name])

    def section(self, name):
        return self.sections.get(name, {})

    def coefficients(self):
        return SYSTEM_FAMILIES[self.family](**self.system_params)


class _Locator:
    """Line/column lookup for keys of an INI text (1-based)."""

    def __init__(self, text):
        self.lines = text.splitlines()

    def section(self, name):
        pattern = re.compile(r'^\s*\[\s*' + re.escape(name) + r'\s*\]')
        for i, line in enumerate(self.lines):
            if pattern.match(line):
                return i + 1, line.index('[') + 1
        return None, None

    def key(self, section, key):
        current = None
        header = re.compile(r'^\s*\[\s*([^\]]+?)\s*\]')
        for i, line in enumerate(self.lines):
            m = header.match(line)
            if m:
                current = m.group(1)
                continue
            if current == section:
                km = re.match(r'^\s*' + re.escape(key) + r'\s*[=:]\s*', line, re.IGNORECASE)
                if km:
                    return i + 1, km.end() + 1
        return self.section(section)


def _read_parser(text, name):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=('#', ';'))
    try:
        parser.read_string(text, source=name)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"{name}: key outside any section", exc.lineno, 1) from exc
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"{name}: cannot parse {line.strip()!r}", lineno, 1) from exc
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ConfigError(f"{name}: {exc.message}", exc.lineno, 1) from exc
    return parser


def _typed(parser, loc, section, key, cast, default=None, required=False):
    if not parser.has_option(section, key):
        if required:
            line, col = loc.section(section)
            raise ConfigError(f"missing required key {section}.{key}", line, col)
        return default
    raw = parser.get(section, key)
    line, col = loc.key(section, key)
    try:
        if cast is bool:
            return parser.getboolean(section, key)
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: cannot read {raw!r} as {cast.__name__}", line, col) from exc


def _positive(value, loc, section, key, minimum=1):
    if value is not None and value < minimum:
        line, col = loc.key(section, key)
        raise ConfigError(f"{section}.{key} must be >= {minimum}, got {value}", line, col)
    return value


def _float_list(raw):
    return tuple(float(v) for v in raw.split(',') if v.strip())


def parse_config_text(text, name='<config>', base_dir=None):
    """ExperimentConfig from INI text; every problem surfaces as ConfigError."""
    parser = _read_parser(text, name)
    loc = _Locator(text)
    if not parser.has_section('experiment'):
        raise ConfigError("missing [experiment] section", 1, 1)
    kind = _typed(parser, loc, 'experiment', 'kind', str, required=True).strip()
    if kind not in EXPERIMENT_KINDS:
        line, col = loc.key('experiment', 'kind')
        raise ConfigError(f"unknown experiment kind {kind!r}", line, col)
    seed = _typed(parser, loc, 'experiment', 'seed', int, required=True)
    if seed < 0:
        line, col = loc.key('experiment', 'seed')
        raise ConfigError("seed must be nonnegative", line, col)
    n_particles = _positive(_typed(parser, loc, 'experiment', 'n_particles', int, 1000), loc,
                            'experiment', 'n_particles')
    n_scenarios = _positive(_typed(parser, loc, 'experiment', 'n_scenarios', int, 8), loc,
                            'experiment', 'n_scenarios')
    out = _typed(parser, loc, 'experiment', 'output_dir', str, f"runs/{kind}")
    if not os.path.isabs(out) and base_dir:
        out = os.path.join(base_dir, out)

    if not parser.has_section('time'):
        raise ConfigError("missing [time] section", 1, 1)
    t_end = _typed(parser, loc, 'time', 't_end', float, required=True)
    n_steps = _typed(parser, loc, 'time', 'n_steps', int, required=True)
    try:
        time_grid = TimeGrid(t_end, n_steps)
    except ValidationError as exc:
        line, col = loc.section('time')
        raise ConfigError(str(exc), line, col) from exc

    space = None
    if parser.has_section('space'):
        try:
            space = SpatialGrid(_typed(parser, loc, 'space', 'x_min', float, required=True),
                                _typed(parser, loc, 'space', 'x_max', float, required=True),
                                _typed(parser, loc, 'space', 'n_cells', int, required=True))
        except ValidationError as exc:
            line, col = loc.section('space')
            raise ConfigError(str(exc), line, col) from exc
    if kind in ('hierarchy_check', 'mollify_suite') and space is None:
        raise ConfigError(f"{kind} needs a [space] section", 1, 1)

    family, params, init = 'zero', {}, InitialLaw('point')
    if parser.has_section('system'):
        family, params, init = _parse_system(parser, loc)
    if kind == 'hierarchy_check' and init.kind not in HIERARCHY_INIT_KINDS:
        line, col = loc.key('system', 'init')
        raise ConfigError("hierarchy_check needs a point or gaussian initial law", line, col)

    gates = {}
    if parser.has_section('gates'):
        for key in parser.options('gates'):
            if key not in GATE_DEFAULTS:
                line, col = loc.key('gates', key)
                raise ConfigError(f"unknown gate {key!r}", line, col)
            gates[key] = _typed(parser, loc, 'gates', key, float)

    sections = {}
    for name_, defaults in SECTION_DEFAULTS.items():
        values = dict(defaults)
        if parser.has_section(name_):
            for key in parser.options(name_):
                if key not in defaults:
                    line, col = loc.key(name_, key)
                    raise ConfigError(f"unknown key {name_}.{key}", line, col)
                values[key] = parser.get(name_, key)
        sections[name_] = values
    _check_sections(sections, loc)

    return ExperimentConfig(kind=kind, seed=seed, n_particles=n_particles, n_scenarios=n_scenarios,
                            output_dir=out, time_grid=time_grid, space=space, family=family,
                            system_params=params, init=init, gates=gates, sections=sections,
                            text=text, name=name)


def _parse_system(parser, loc):
    family = parser.get('system', 'family', fallback='zero').strip()
    if family not in SYSTEM_FAMILIES:
        line, col = loc.key('system', 'family')
        raise ConfigError(f"unknown system family {family!r}", line, col)
    accepted = set(inspect.signature(SYSTEM_FAMILIES[family]).parameters) - {'d'}
    init_keys = {'init', 'init_mean', 'init_std', 'init_low', 'init_high'}
    params = {}
    for key in parser.options('system'):
        if key == 'family' or key in init_keys:
            continue
        if key not in accepted:
            line, col = loc.key('system', key)
            raise ConfigError(f"family {family!r} has no parameter {key!r}", line, col)
        params[key] = _typed(parser, loc, 'system', key, float)
    kind = parser.get('system', 'init', fallback='point').strip()
    try:
        init = InitialLaw(kind,
                          location=_typed(parser, loc, 'system', 'init_mean', float, 0.0),
                          scale=_typed(parser, loc, 'system', 'init_std', float, 1.0),
                          low=_typed(parser, loc, 'system', 'init_low', float, 0.0),
                          high=_typed(parser, loc, 'system', 'init_high', float, 1.0))
    except ValidationError as exc:
        line, col = loc.key('system', 'init')
        raise ConfigError(str(exc), line, col) from exc
    return family, params, init


def _check_sections(sections, loc):
    casts = {'stride': int, 'save_stride': int, 'n_functions': int, 'n_moments': int, 'max_train': int,
             'n_draws': int, 'n_atoms': int, 'max_iter': int}
    for name_, values in sections.items():
        for key, raw in values.items():
            try:
                if key in ('check_times', 'scales'):
                    _float_list(raw)
                elif key in casts:
                    if int(raw) < 1:
                        raise ValueError(raw)
                elif key in ('mode',):
                    if raw not in ('conditional', 'classical'):
                        raise ValueError(raw)
                elif key in ('sabotage_check', 'idempotence'):
                    if raw.strip().lower() not in configparser.ConfigParser.BOOLEAN_STATES:
                        raise ValueError(raw)
                else:
                    float(raw)
            except ValueError as exc:
                line, col = loc.key(name_, key)
                raise ConfigError(f"{name_}.{key}: invalid value {raw!r}", line, col) from exc


def parse_config(path):
    try:
        with open(path, encoding='utf-8') as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config_text(text, os.path.basename(path), os.path.dirname(os.path.abspath(path)))


# ------------------ Gates ------------------
@dataclass(frozen=True)
class Gate:
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ''

    def as_dict(self):
        return dict(name=self.name, value=self.value, threshold=self.threshold, passed=self.passed,
                    detail=self.detail)


def at_most(name, value, threshold, detail=''):
    value = float(value)
    return Gate(name, value, float(threshold), bool(value <= threshold), detail)


def at_least(name, value, threshold, detail=''):
    value = float(value)
    return Gate(name, value, float(threshold), bool(value >= threshold), detail)


@dataclass
class PipelineResult:
    gates: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)


def map_scenarios(fn, indices, workers=None):
    """fn over scenario indices on a thread pool; results come back in index order."""
    indices = list(indices)
    workers = workers or worker_count()
    if workers == 1 or len(indices) == 1:
        return [fn(s) for s in indices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, indices))


def _section_bool(values, key):
    return configparser.ConfigParser.BOOLEAN_STATES[values[key].strip().lower()]


# ------------------ Pipelines ------------------
def initial_grid_density(init, grid):
    """Grid density of a point or gaussian initial law; a point becomes a gaussian of width 2·dx."""
    if init.kind == 'point':
        return gaussian_density(grid, init.location, 2.0 * grid.dx)
    if init.kind == 'gaussian':
        return gaussian_density(grid, init.location, init.scale)
    raise ValidationError(f"no grid density for a {init.kind} initial law")


def _family_params(config):
    defaults = {name: p.default for name, p in inspect.signature(SYSTEM_FAMILIES[config.family]).parameters.items()
                if p.default is not inspect.Parameter.empty}
    return {**defaults, **config.system_params}


def run_hierarchy_check(config, store, workers=None):
    """Particle, grid and measure-space levels of one system under shared scenarios."""
    opts = config.section('hierarchy')
    coeffs = config.coefficients()
    grid = config.space
    tg = config.time_grid
    init = config.init
    length = grid.x_max - grid.x_min
    basis = dyadic_basis(grid.x_min + 0.25 * length, grid.x_max - 0.25 * length, int(opts['n_functions']))
    rho0 = initial_grid_density(init, grid)
    ou = _family_params(config) if config.family == 'ou' else None

    def unit(s):
        scenario = make_scenario(config.seed, s, tg)
        ensemble = simulate_mckv(coeffs, init, scenario, config.n_particles)
        flow = solve_spde(coeffs, rho0, scenario, grid)
        residuals = np.array([weak_residual(flow, phi, coeffs) for phi in basis])
        w1 = wasserstein1_1d(ensemble.view(tg.n_steps), flow.view(tg.n_steps))
        closed_form = None
        if ou is not None:
            closed_form = ou_benchmark(ensemble, x0_mean=init.mean(), x0_var=init.variance(),
                                       n_se=config.gate('n_se'), **ou)
        return scenario, ensemble, flow, residuals, w1, closed_form

    units = map_scenarios(unit, range(config.n_scenarios), workers)
    for scenario, *_ in units:
        store.write('scenario', f"scenarios/scenario_{scenario.scenario_index:04d}.csv", save_scenario, scenario)
    first_scenario, first_ensemble, first_flow, first_residuals = units[0][:4]
    store.write('density', 'density_0000.csv', save_density_flow, first_flow,
                scenario_file='scenarios/scenario_0000.csv')
    store.write('ensemble', 'ensemble_0000.csv', save_ensemble, first_ensemble,
                stride=int(opts['save_stride']))
    for i, res in enumerate(first_residuals):
        store.write('residual', f"weak_residual_phi{i}.csv", save_residual_path, tg.nodes, res)

    weak = max(float(np.max(np.abs(u[3]))) for u in units)
    w1 = np.array([u[4] for u in units])
    gates = [at_most('weak_residual', weak, config.gate('weak_residual')),
             at_most('cross_level_w1', w1.max(), config.gate('cross_level_w1'))]
    store.write('report', 'cross_level.json', save_json,
                dict(w1=w1, weak_residual_max=[float(np.max(np.abs(u[3]))) for u in units]))
    if ou is not None:
        closed = [u[5] for u in units]
        gates.append(at_most('ou_mean', max(c.mean_ratio for c in closed), 1.0,
                             detail=f"n_se={config.gate('n_se')} plus 5*dt"))
        gates.append(at_most('ou_variance', max(c.worst_variance for c in closed), config.gate('ou_variance')))
        store.write('report', 'ou_closed_form.json', save_json,
                    dict(nodes=list(closed[0].nodes),
                         mean_ratio=[c.mean_ratio for c in closed],
                         variance_error=[c.worst_variance for c in closed]))

    if config.n_scenarios >= 2:
        summary = summarize([u[1] for u in units], basis, int(opts['stride']))
        store.write('features', 'features.csv', save_feature_trajectories, summary)
        records = []
        n_se, slack = config.gate('n_se'), config.gate('fpe_slack')
        for F in functional_battery(basis):
            rep = fpe_residual(summary, F, coeffs)
            records.extend(rep.as_records())
            ratio = _se_ratio(rep.residual, rep.stderr, slack)
            gates.append(Gate(f"fpe_{F.functional_id}", ratio, n_se, rep.within(n_se, slack)))
        if _section_bool(opts, 'sabotage_check'):
            sabotaged = scaled(coeffs, gamma=2.0)
            reps = [fpe_residual(summary, F, sabotaged) for F in functional_battery(basis)]
            worst = max(_se_ratio(rep.residual, rep.stderr, 0.0) for rep in reps)
            gates.append(at_least('fpe_sabotage_detected', worst, config.gate('sabotage_n_se')))
        store.write('report', 'fpe_residuals.json', save_json, records)
    else:
        logger.warning("hierarchy_check n_scenarios=1 skips the measure-space residuals")
    logger.info(f"hierarchy_check scenarios={config.n_scenarios} weak={weak:.3e} w1={w1.max():.4f}")
    return PipelineResult(gates=gates, seeds=dict(master_seed=config.seed, scenarios=list(range(config.n_scenarios))))


def _ratio(num, den):
    if den > 0:
        return float(num / den)
    return 0.0 if num == 0 else math.inf


def _se_ratio(residual, stderr, slack):
    residual = np.abs(np.asarray(residual))
    stderr = np.asarray(stderr)
    with np.errstate(divide='ignore', invalid='ignore'):
        ratio = np.where(residual <= slack, 0.0, residual / stderr)
    return float(np.max(ratio))


def run_mimicking(config, store, workers=None):
    opts = config.section('mimicking')
    system_kw = {k: float(opts[k]) for k in ('c1', 'c2', 'noise', 'sigma', 'gamma')}
    feature_map = FeatureMap(n_moments=int(opts['n_moments']))
    mcfg = MimickingConfig(master_seed=config.seed, grid=config.time_grid, n_scenarios=config.n_scenarios,
                           n_particles=config.n_particles, stride=int(opts['stride']), mode=opts['mode'],
                           feature_map=feature_map, check_times=_float_list(opts['check_times']),
                           max_train=int(opts['max_train']))
    report = run_mimicking_experiment(randomized_linear_system(**system_kw), config.init, mcfg)
    store.write('report', 'mimicking_report.json', save_json, report.to_dict())
    table = report.projected.to_table(np.linspace(-3.0, 3.0, 25))
    store.write('projection', 'projection_table.csv', save_projection_table, table, 1, feature_map.size)

    n_se = config.gate('n_se')
    worst = max(_ratio(abs(g), se) for rows in report.battery.values() for g, se in rows)
    gates = [Gate('mimicking_battery', float(worst), n_se, report.battery_within(n_se))]
    if _section_bool(opts, 'idempotence'):
        markov = run_mimicking_experiment(randomized_linear_system(**dict(system_kw, noise=0.0)),
                                          config.init, mcfg)
        store.write('report', 'idempotence_report.json', save_json, markov.to_dict())
        gap = float(markov.matched_w1.mean(axis=0).max())
        gates.append(at_most('idempotence_w1', gap, config.gate('idempotence_w1')))
    return PipelineResult(gates=gates, seeds=dict(master_seed=config.seed,
                                                  scenarios=list(range(2 * config.n_scenarios))))


def run_mfc_compare(config, store, workers=None):
    opts = config.section('mfc')
    gain, noise = float(opts['gain']), float(opts['noise'])
    problem = lq_problem(config.time_grid, config.init, bound=float(opts['bound']))
    open_loop = feedback_plus_noise(lambda t, x, m: -gain * x, scale=noise)
    mcfg = MfcConfig(master_seed=config.seed, n_scenarios=config.n_scenarios, n_particles=config.n_particles,
                     stride=int(opts['stride']), feature_map=FeatureMap(n_moments=int(opts['n_moments'])),
                     check_times=_float_list(opts['check_times']), tol=float(opts['tol']))
    seeds = dict(master_seed=config.seed, scenarios=list(range(config.n_scenarios)))
    try:
        comparison = markovianize_and_compare(problem, open_loop, mcfg)
    except RoxinConditionError as exc:
        return PipelineResult(gates=[Gate('roxin', 1.0, 0.0, False, str(exc))], seeds=seeds)
    out = comparison.to_dict()
    expected = noise**2 * config.time_grid.t_end
    out['expected_gap'] = expected
    store.write('report', 'mfc_comparison.json', save_json, out)

    n_se = config.gate('n_se')
    o, mk = comparison.open_cost, comparison.markov_cost
    combined = math.hypot(o.se, mk.se)
    worst = max(_ratio(abs(g), se) for rows in comparison.gaps.values() for g, se in rows)
    gates = [
        # regression error in the feedback costs O(1/n_train), hence the slack on top of n_se
        at_most('mfc_gap', abs(comparison.gap - expected), n_se * comparison.gap_se + config.gate('mfc_gap_slack'),
                f"gap={comparison.gap:.6g} expected={expected:.6g} se={comparison.gap_se:.3g}"),
        at_most('mfc_markov_not_worse', mk.J - o.J - n_se * combined, 0.0),
        at_most('mfc_battery', worst, n_se),
    ]
    return PipelineResult(gates=gates, seeds=seeds)


def _random_draw(seed, j, n_atoms):
    """Random weighted measure and smooth coefficient triple for one invariant draw."""
    rng = stream_rng(seed, j, 0)
    atoms = rng.normal(rng.uniform(-1.0, 1.0), rng.uniform(0.3, 1.5), n_atoms)
    weights = rng.dirichlet(np.ones(n_atoms))
    c0, c1, freq = rng.normal(), rng.normal(), rng.uniform(0.5, 3.0)
    s0, g0, g1 = rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0), rng.uniform(-0.5, 0.5)
    coeffs = from_functions(drift=lambda t, m, x, p: c0 + c1 * np.sin(freq * x),
                            sigma=lambda t, m, x, p: s0,
                            gamma=lambda t, m, x, p: g0 + g1 * np.tanh(x))
    return MeasureView(atoms[:, None], weights), coeffs


def run_mollify_suite(config, store, workers=None):
    opts = config.section('mollify')
    scales = _float_list(opts['scales'])
    grid = config.space
    radius = float(opts['radius'])
    n_atoms = int(opts['n_atoms'])

    def unit(j):
        mu, coeffs = _random_draw(config.seed, j, n_atoms)
        jensen, psd, c1_ratio, c1_ok, tables = [], [], [], True, []
        for n in scales:
            kernel = MollifierKernel(n)
            tab = smooth_coefficients(coeffs, mu, kernel, grid)
            tables.append(tab)
            jensen += [tab.jensen_gap(p, form) for p in (1.0, 2.0) for form in ('drift', 'diffusion')]
            psd.append(check_psd_defect(tab.a, tab.gamma, mask=~tab.invalid).min_eigenvalue)
            ok, deriv, bound = c1_bound_check(tab, kernel)
            c1_ok = c1_ok and ok
            c1_ratio.append(deriv / bound if bound > 0 else 0.0)
        cut = cutoff_projection(coeffs, mu, radius, grid.dx)
        jensen += [cut.jensen_gap(p) for p in (1.0, 2.0)]
        psd.append(check_psd_defect(cut.a, cut.gamma, mask=cut.populated).min_eigenvalue)
        return max(jensen), min(psd), max(c1_ratio), c1_ok, tables

    units = map_scenarios(unit, range(int(opts['n_draws'])), workers)
    for n, tab in zip(scales, units[0][4]):
        store.write('mollify_table', f"mollified_n{int(n)}.csv", save_mollified_tables, tab)
    mu, coeffs = _random_draw(config.seed, 0, n_atoms)
    path = consistency_path(coeffs, mu, grid, ns=scales)
    jensen = max(u[0] for u in units)
    psd = min(u[1] for u in units)
    store.write('report', 'mollify_summary.json', save_json,
                dict(scales=scales, jensen_gap=[u[0] for u in units], psd_min=[u[1] for u in units],
                     c1_ratio=[u[2] for u in units], consistency=path))
    gates = [
        at_most('jensen_slack', jensen, config.gate('jensen_slack')),
        at_least('psd_floor', psd, config.gate('psd_floor')),
        Gate('c1_bound', max(u[2] for u in units), 1.0, all(u[3] for u in units)),
        Gate('mollify_consistency', max((_ratio(b, a) for a, b in zip(path, path[1:])), default=0.0),
             1.0, bool(np.all(np.diff(path) <= 0))),
    ]
    return PipelineResult(gates=gates, seeds=dict(master_seed=config.seed, draws=int(opts['n_draws'])))


def run_picard(config, store, workers=None):
    opts = config.section('picard')
    coeffs = config.coefficients()

    def unit(s):
        scenario = make_scenario(config.seed, s, config.time_grid)
        _, report = picard_solve(coeffs, config.init, scenario, tolerance=float(opts['tolerance']),
                                 max_iter=int(opts['max_iter']), N=config.n_particles)
        return report

    reports = map_scenarios(unit, range(config.n_scenarios), workers)
    store.write('report', 'picard.json', save_json,
                [dict(deltas=r.deltas, iterations=r.iterations, converged=r.converged) for r in reports])
    ratios = np.concatenate([r.ratios() for r in reports])
    worst = float(np.max(ratios)) if ratios.size else 0.0
    gates = [at_most('picard_ratio', worst, config.gate('picard_ratio')),
             Gate('picard_converged', float(sum(r.converged for r in reports)), float(len(reports)),
                  all(r.converged for r in reports))]
    return PipelineResult(gates=gates, seeds=dict(master_seed=config.seed, scenarios=list(range(config.n_scenarios))))


PIPELINES = {
    'hierarchy_check': run_hierarchy_check,
    'mimicking': run_mimicking,
    'mfc_compare': run_mfc_compare,
    'mollify_suite': run_mollify_suite,
    'picard': run_picard,
}


def run_pipeline(config, output_dir=None, workers=None):
    """Run the configured pipeline; returns (PipelineResult, ArtifactStore)."""
    store = ArtifactStore(output_dir or config.output_dir)
    os.makedirs(store.output_dir, exist_ok=True)
    logger.info(f"run_pipeline kind={config.kind} seed={config.seed} out={store.output_dir}")
    result = PIPELINES[config.kind](config, store, workers)
    failing = [g.name for g in result.gates if not g.passed]
    if failing:
        logger.warning(f"gates_failed kind={config.kind} names={','.join(failing)}")
    return result, store
