"""CSV/JSON artifacts with SHA-256 sidecars, and the per-run manifest.

Floats are written with repr, the shortest string that parses back to the same
double, so every save/load pair is bit-exact. Loaders check the sidecar before parsing
and never hand back a partially read object.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import threading
from datetime import datetime, timezone
from importlib import metadata

import numpy as np

from core import ChecksumError, Scenario, TimeGrid, ValidationError
from labconfig import logger
from spde_grid import GridDensityFlow, SpatialGrid

SCENARIO_HEADER = ['seed', 'scenario_index', 'd', 'n_steps', 'T']
DENSITY_HEADER = ['scenario_index', 'time_index', 'cell_index', 'x', 'rho']
RESIDUAL_HEADER = ['time', 'residual']
FEATURE_HEADER = ['scenario_index', 'time_index', 'phi_index', 'value']
MOLLIFY_HEADER = ['x', 'b', 'a', 'gamma']
COMPANION_SUFFIXES = ('.meta.json', '.summary.json')
TRACKED_PACKAGES = ('numpy', 'scipy', 'click', 'SQLAlchemy', 'python-dotenv')


# ------------------ Checksums ------------------
def sha256_of(path):
    h = hashlib.sha256()
    with open(path, 'rb') as fh:
        for block in iter(lambda: fh.read(1 << 20), b''):
            h.update(block)
    return h.hexdigest()


def _sidecar(path):
    return str(path) + '.sha256'


def _write_bytes(path, payload):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'wb') as fh:
        fh.write(payload)
    digest = hashlib.sha256(payload).hexdigest()
    with open(_sidecar(path), 'w', encoding='ascii') as fh:
        fh.write(f"{digest}  {os.path.basename(path)}\n")
    return digest


def verify(path):
    """Digest of path after checking it against its sidecar; ChecksumError otherwise."""
    if not os.path.exists(path):
        raise ChecksumError(f"missing artifact {path}")
    if not os.path.exists(_sidecar(path)):
        raise ChecksumError(f"missing checksum sidecar for {path}")
    with open(_sidecar(path), encoding='ascii') as fh:
        expected = fh.read().split()
    actual = sha256_of(path)
    if not expected or expected[0] != actual:
        logger.error(f"checksum_mismatch path={path}")
        raise ChecksumError(f"checksum mismatch for {path}")
    return actual


def _read_verified(path):
    verify(path)
    with open(path, 'rb') as fh:
        return fh.read().decode('utf-8')


# ------------------ Encoding Helpers ------------------
def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _csv_bytes(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue().encode('utf-8')


def _parse_csv(text, header, path):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != list(header):
        raise ChecksumError(f"unexpected header in {path}")
    return rows[1:]


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, (set, tuple)):
        return list(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def save_json(obj, path):
    payload = json.dumps(obj, indent=2, sort_keys=True, default=_json_default).encode('utf-8')
    return _write_bytes(path, payload)


def load_json(path):
    text = _read_verified(path)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ChecksumError(f"{path} is not valid JSON: {exc}") from exc


def save_csv(header, rows, path):
    return _write_bytes(path, _csv_bytes(header, rows))


# ------------------ Scenarios ------------------
def save_scenario(scenario, path):
    grid = scenario.grid
    if grid.t_start != 0.0:
        raise ValidationError("scenario files assume the time grid starts at 0")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(SCENARIO_HEADER)
    writer.writerow([_fmt(scenario.master_seed), _fmt(scenario.scenario_index), _fmt(scenario.d),
                     _fmt(grid.n_steps), _fmt(grid.t_end)])
    for row in scenario.increments:
        writer.writerow([_fmt(v) for v in row])
    digest = _write_bytes(path, buf.getvalue().encode('utf-8'))
    logger.info(f"save_scenario path={path} scenario={scenario.scenario_index}")
    return digest


def load_scenario(path):
    rows = _parse_csv(_read_verified(path), SCENARIO_HEADER, path)
    try:
        seed, index, d, n_steps, t_end = rows[0]
        d, n_steps = int(d), int(n_steps)
        increments = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    except (ValueError, IndexError) as exc:
        raise ChecksumError(f"malformed scenario file {path}: {exc}") from exc
    if increments.shape != (n_steps, d):
        raise ChecksumError(f"scenario file {path} holds {increments.shape}, header says {(n_steps, d)}")
    return Scenario(grid=TimeGrid(float(t_end), n_steps), increments=increments,
                    master_seed=int(seed), scenario_index=int(index))


# ------------------ Density Flows ------------------
def save_density_flow(flow, path, scenario_file=None):
    grid, tg = flow.grid, flow.time_grid
    s_index = flow.scenario.scenario_index if flow.scenario is not None else -1
    centers = grid.centers
    rows = ((s_index, k, i, centers[i], flow.values[k, i])
            for k in range(tg.n_nodes) for i in range(grid.n_cells))
    digest = save_csv(DENSITY_HEADER, rows, path)
    meta = dict(x_min=grid.x_min, x_max=grid.x_max, n_cells=grid.n_cells, t_start=tg.t_start,
                t_end=tg.t_end, n_steps=tg.n_steps, scenario_index=s_index,
                master_seed=None if flow.scenario is None else flow.scenario.master_seed,
                scenario_file=scenario_file, clipped=flow.clipped, mass_defect=flow.mass_defect)
    save_json(meta, str(path) + '.meta.json')
    logger.info(f"save_density_flow path={path} nodes={tg.n_nodes} cells={grid.n_cells}")
    return digest


def load_density_flow(path, scenario=None):
    meta = load_json(str(path) + '.meta.json')
    rows = _parse_csv(_read_verified(path), DENSITY_HEADER, path)
    grid = SpatialGrid(meta['x_min'], meta['x_max'], int(meta['n_cells']))
    tg = TimeGrid(meta['t_end'], int(meta['n_steps']), meta['t_start'])
    values = np.full((tg.n_nodes, grid.n_cells), np.nan)
    try:
        for _, k, i, _, rho in rows:
            values[int(k), int(i)] = float(rho)
    except (ValueError, IndexError) as exc:
        raise ChecksumError(f"malformed density file {path}: {exc}") from exc
    if np.isnan(values).any():
        raise ChecksumError(f"density file {path} is incomplete")
    if scenario is None and meta.get('scenario_file'):
        scenario = load_scenario(os.path.join(os.path.dirname(os.path.abspath(path)), meta['scenario_file']))
    return GridDensityFlow(grid=grid, time_grid=tg, values=values, scenario=scenario,
                           clipped=meta['clipped'], mass_defect=meta['mass_defect'])


# ------------------ Projection Tables ------------------
def projection_header(d, n_features):
    xs = ['x'] if d == 1 else [f"x_{i + 1}" for i in range(d)]
    return (['t'] + xs + [f"feat_{j + 1}" for j in range(n_features)]
            + [f"bhat_{i + 1}" for i in range(d)]
            + [f"ahat_{i + 1}{j + 1}" for i in range(d) for j in range(d)])


def save_projection_table(table, d, n_features, path):
    table = np.asarray(table, dtype=float)
    header = projection_header(d, n_features)
    if table.ndim != 2 or table.shape[1] != len(header):
        raise ValidationError(f"table has shape {table.shape}, expected (*, {len(header)})")
    digest = save_csv(header, table, path)
    save_json(dict(d=d, n_features=n_features, rows=table.shape[0]), str(path) + '.meta.json')
    return digest


def load_projection_table(path):
    meta = load_json(str(path) + '.meta.json')
    header = projection_header(int(meta['d']), int(meta['n_features']))
    rows = _parse_csv(_read_verified(path), header, path)
    try:
        table = np.array([[float(v) for v in r] for r in rows], dtype=float).reshape(-1, len(header))
    except ValueError as exc:
        raise ChecksumError(f"malformed projection table {path}: {exc}") from exc
    if table.shape[0] != int(meta['rows']):
        raise ChecksumError(f"projection table {path} holds {table.shape[0]} rows, expected {meta['rows']}")
    return table, meta


# ------------------ Other Module Outputs ------------------
def save_residual_path(times, residual, path):
    return save_csv(RESIDUAL_HEADER, zip(times, residual), path)


def save_ensemble(ensemble, path, stride=1):
    """Particle states every stride-th node as CSV plus a summary JSON of per-node
    conditional moments (all nodes)."""
    s_index = ensemble.scenario.scenario_index
    header = ['scenario_index', 'time_index', 'particle_index'] + [f"x_{i + 1}" for i in range(ensemble.d)]
    rows = ((s_index, k, p, *ensemble.states[k, p])
            for k in range(0, ensemble.n_nodes, stride) for p in range(ensemble.N))
    digest = save_csv(header, rows, path)
    summary = dict(scenario_index=s_index, master_seed=ensemble.scenario.master_seed, N=ensemble.N,
                   times=ensemble.scenario.grid.nodes, mean=ensemble.conditional_mean(),
                   variance=ensemble.conditional_variance())
    save_json(summary, os.path.splitext(str(path))[0] + '.summary.json')
    return digest


def save_feature_trajectories(summary, path):
    rows = ((s, int(k), i, summary.features[s, j, i])
            for s in range(summary.M) for j, k in enumerate(summary.node_indices)
            for i in range(summary.features.shape[2]))
    return save_csv(FEATURE_HEADER, rows, path)


def save_mollified_tables(tables, path):
    return save_csv(MOLLIFY_HEADER, zip(tables.x, tables.b, tables.a, tables.gamma), path)


def load_csv_table(path, header):
    rows = _parse_csv(_read_verified(path), header, path)
    try:
        return np.array([[float(v) for v in r] for r in rows], dtype=float).reshape(-1, len(header))
    except ValueError as exc:
        raise ChecksumError(f"malformed table {path}: {exc}") from exc


# ------------------ Artifact Store and Manifest ------------------
def _companion(name, suffix):
    if suffix == '.summary.json':
        return os.path.splitext(name)[0] + suffix
    return name + suffix


class ArtifactStore:
    """Serialises artifact writes of one run and keeps their checksums for the manifest."""

    def __init__(self, output_dir):
        self.output_dir = os.path.abspath(output_dir)
        self.artifacts = []
        self._lock = threading.Lock()

    def path(self, name):
        return os.path.join(self.output_dir, name)

    def write(self, kind, name, saver, *args, **kwargs):
        target = self.path(name)
        with self._lock:
            digest = saver(*args, target, **kwargs)
            self.artifacts.append(dict(path=name, kind=kind, sha256=digest))
            for suffix in COMPANION_SUFFIXES:
                companion = _companion(name, suffix)
                if os.path.exists(self.path(companion)):
                    self.artifacts.append(dict(path=companion, kind=kind + '_meta',
                                               sha256=verify(self.path(companion))))
        return target


def package_versions(names=TRACKED_PACKAGES):
    versions = {}
    for name in names:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


def now_iso():
    return datetime.now(timezone.utc).isoformat()


def write_manifest(output_dir, config_text, config_name, seeds, started, finished, artifacts, gates,
                   workers, kind):
    manifest = dict(kind=kind, config_name=config_name, config_text=config_text,
                    config_sha256=hashlib.sha256(config_text.encode('utf-8')).hexdigest(),
                    seeds=seeds, versions=package_versions(), started=started, finished=finished,
                    workers=workers, artifacts=artifacts, gates=gates)
    path = os.path.join(output_dir, 'manifest.json')
    save_json(manifest, path)
    logger.info(f"write_manifest path={path} artifacts={len(artifacts)} gates={len(gates)}")
    return path


def load_manifest(artifact_dir):
    return load_json(os.path.join(artifact_dir, 'manifest.json'))
