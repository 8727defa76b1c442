"""Markovian projection of random coefficients and the mimicking experiment.

An original particle system whose drift and diffusion read extra randomness (auxiliary
noise ξ, the idiosyncratic path W, the common-noise history) is simulated, its
coefficients are regressed on the conditioners (X_t, features of μ_t), and a
conditional McKean–Vlasov system driven by the fitted surfaces is re-simulated and
compared with the original one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from core import MeasureView, ValidationError, lift, make_scenario, wasserstein1_1d
from labconfig import logger
from particle_sde import (CoefficientField, ParticleEnsemble, affine_mean_field, draw_aux_noise,
                          draw_particle_noise, euler_maruyama)

MIN_SLICE_SAMPLES = 100
QUERY_BLOCK = 512


# ------------------ Square Roots ------------------
def psd_sqrt_with_clip(a, sym_tol=1e-10):
    """Symmetric PSD square root of a (or of a stack of matrices) and the clipped magnitude."""
    a = np.asarray(a, dtype=float)
    if np.max(np.abs(a - np.swapaxes(a, -1, -2)), initial=0.0) > sym_tol:
        raise ValidationError("matrix is not symmetric within tolerance")
    sym = 0.5 * (a + np.swapaxes(a, -1, -2))
    vals, vecs = np.linalg.eigh(sym)
    clip = float(max(0.0, -vals.min())) if vals.size else 0.0
    root = (vecs * np.sqrt(np.clip(vals, 0.0, None))[..., None, :]) @ np.swapaxes(vecs, -1, -2)
    return root, clip


def psd_sqrt(a, sym_tol=1e-10):
    return psd_sqrt_with_clip(a, sym_tol)[0]


# ------------------ Features ------------------
@dataclass(frozen=True)
class FeatureMap:
    """Finite summary of a measure: raw moments of the first coordinate, optionally
    followed by pairings with a test basis."""
    n_moments: int = 4
    basis: object = None

    @property
    def size(self):
        return self.n_moments + (len(self.basis) if self.basis is not None else 0)

    def __call__(self, m):
        moments = [float(m.moment(k)[0]) for k in range(1, self.n_moments + 1)]
        if self.basis is None:
            return np.asarray(moments)
        return np.concatenate([moments, lift(m, self.basis)])


# ------------------ Kernel Regression ------------------
def silverman_bandwidths(X):
    n = X.shape[0]
    spread = X.std(axis=0)
    h = 1.06 * spread * n**-0.2
    return np.where(spread > 0, h, 1.0)


class KernelRegression:
    """Nadaraya–Watson regression with a Gaussian product kernel.

    f(q) = Σ_i w_i(q) y_i with w_i(q) ∝ Π_j exp(−½((q_j − X_ij)/h_j)²); weights are
    normalised after subtracting the largest log-weight so distant queries fall back to
    the nearest training points instead of dividing by zero.
    """

    def __init__(self, bandwidths=None):
        self.bandwidths = bandwidths
        self.parameters = {'X': None, 'y': None, 'h': None, 'low': None, 'high': None}

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.bandwidths is None:
            h = silverman_bandwidths(X)
        else:
            h = np.broadcast_to(np.asarray(self.bandwidths, dtype=float), (X.shape[1],)).copy()
            if np.any(h <= 0):
                raise ValidationError("bandwidths must be positive")
        self.parameters = {'X': X, 'y': y.reshape(y.shape[0], -1), 'h': h,
                           'low': X.min(axis=0), 'high': X.max(axis=0)}
        return self

    def outside_hull(self, Q):
        P = self.parameters
        return np.any((Q < P['low']) | (Q > P['high']), axis=1)

    def predict(self, Q):
        P = self.parameters
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        out = np.empty((Q.shape[0], P['y'].shape[1]))
        Xs = P['X'] / P['h']
        for start in range(0, Q.shape[0], QUERY_BLOCK):
            q = Q[start:start + QUERY_BLOCK] / P['h']
            diff = q[:, None, :] - Xs[None, :, :]
            logw = -0.5 * np.einsum('qnj,qnj->qn', diff, diff)
            logw -= logw.max(axis=1, keepdims=True)
            w = np.exp(logw)
            out[start:start + QUERY_BLOCK] = (w @ P['y']) / w.sum(axis=1, keepdims=True)
        return out


# ------------------ Samples ------------------
@dataclass(frozen=True)
class ProjectionSample:
    t: float
    x: np.ndarray
    features: np.ndarray
    b: np.ndarray
    a: np.ndarray
    scenario_index: int


@dataclass
class SliceSamples:
    """Columnar samples harvested at one time node."""
    node: int
    t: float
    x: np.ndarray
    features: np.ndarray
    b: np.ndarray
    a: np.ndarray
    scenario_index: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    def record(self, i):
        return ProjectionSample(self.t, self.x[i], self.features[i], self.b[i], self.a[i],
                                int(self.scenario_index[i]))


@dataclass(frozen=True)
class RandomCoefficientSystem:
    """Original system with coefficients f(t, m, x, path, xi, w).

    xi is per-particle auxiliary N(0, I) noise of size n_aux drawn fresh every step,
    w the particle's own idiosyncratic Brownian value W_t. gamma_hat is the common-noise
    coefficient in Markovian form.
    """
    drift: Callable
    sigma: Callable
    gamma_hat: CoefficientField
    n_aux: int = 1

    @property
    def d(self):
        return self.gamma_hat.d


def randomized_linear_system(c1=-1.0, c2=0.0, noise=0.5, sigma=1.0, gamma=1.0):
    """b = c1·x + c2·mean(m) + noise·ξ with ξ fresh every step; σ and γ constant.

    ξ is independent of (X_t, μ_t), so the projected drift is c1·x + c2·mean(m).
    noise=0 gives a Markovian system, the idempotence case.
    """
    def drift(t, m, x, path, xi, w):
        return c1 * x + c2 * m.mean() + noise * xi[:, :1]

    return RandomCoefficientSystem(drift=drift, sigma=lambda t, m, x, path, xi, w: sigma,
                                   gamma_hat=affine_mean_field(gamma=gamma), n_aux=1)


def simulate_original(system, init, scenario, N, harvest_nodes=()):
    """Simulate the random-coefficient system and record (b, a) observations at harvest nodes."""
    x0, dW, idx = draw_particle_noise(scenario, init, N)
    xi = draw_aux_noise(scenario, N, system.n_aux)
    W = np.concatenate([np.zeros((N, 1, scenario.d)), np.cumsum(dW, axis=1)], axis=1)
    B = scenario.B
    harvest = set(int(k) for k in harvest_nodes)
    observed = {}

    def step(k, t, x):
        m = MeasureView.from_points(x)
        path = B[:k + 1]
        b = np.broadcast_to(np.asarray(system.drift(t, m, x, path, xi[:, k], W[:, k]), dtype=float), x.shape)
        s = np.asarray(system.sigma(t, m, x, path, xi[:, k], W[:, k]), dtype=float)
        if s.ndim == 0:
            s = s * np.eye(scenario.d)
        s = np.broadcast_to(s, (N, scenario.d, scenario.d))
        g = system.gamma_hat.gamma(t, m, x, path)
        if k in harvest:
            a = np.einsum('nik,njk->nij', s, s) + np.einsum('nik,njk->nij', g, g)
            observed[k] = (x.copy(), np.array(b), a)
        return b, s, g

    logger.info(f"simulate_original scenario={scenario.scenario_index} n={N}")
    states = euler_maruyama(step, x0, dW, scenario)
    return ParticleEnsemble(scenario=scenario, states=states, dW=dW, w_seeds=idx), observed


def harvest_samples(runs, feature_map, mode='conditional'):
    """Group observations of several scenarios into per-node SliceSamples."""
    by_node = {}
    for ensemble, observed in runs:
        for k, (x, b, a) in observed.items():
            if mode == 'classical':
                feats = np.zeros(feature_map.size)
            else:
                feats = feature_map(ensemble.view(k))
            by_node.setdefault(k, []).append((x, np.broadcast_to(feats, (x.shape[0], feats.size)), b, a,
                                              np.full(x.shape[0], ensemble.scenario.scenario_index)))
    grid = runs[0][0].scenario.grid
    slices = []
    for k in sorted(by_node):
        parts = by_node[k]
        slices.append(SliceSamples(node=k, t=float(grid.nodes[k]),
                                   x=np.concatenate([p[0] for p in parts]),
                                   features=np.concatenate([p[1] for p in parts]),
                                   b=np.concatenate([p[2] for p in parts]),
                                   a=np.concatenate([p[3] for p in parts]),
                                   scenario_index=np.concatenate([p[4] for p in parts])))
    return slices


# ------------------ Projection ------------------
@dataclass
class ProjectedCoefficients:
    mode: str
    dt: float
    d: int
    n_features: int
    slices: dict
    bandwidths: dict
    unusable: tuple = ()
    diagnostics: dict = field(default_factory=lambda: {'fallbacks': 0, 'extrapolated': 0, 'queries': 0})

    def _conditioners(self, x, features):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        feats = np.zeros(self.n_features) if self.mode == 'classical' else np.asarray(features, dtype=float)
        feats = np.broadcast_to(feats, (x.shape[0], self.n_features))
        return np.hstack([x, feats])

    def slice_for(self, t):
        k = int(round(t / self.dt))
        usable = sorted(self.slices)
        if not usable:
            raise ValidationError("no usable time slice in the projection")
        if k in self.slices:
            return self.slices[k]
        nearest = min(usable, key=lambda j: (abs(j - k), j))
        if k in self.unusable:
            if not self.diagnostics['fallbacks']:
                logger.warning(f"projection_fallback node={k} nearest={nearest}")
            self.diagnostics['fallbacks'] += 1
        return self.slices[nearest]

    def query(self, t, x, features):
        """(b̂, â) at states x of shape (n, d) for one feature vector."""
        Q = self._conditioners(x, features)
        reg_b, reg_a = self.slice_for(t)
        outside = int(reg_b.outside_hull(Q).sum())
        self.diagnostics['queries'] += Q.shape[0]
        if outside:
            self.diagnostics['extrapolated'] += outside
        bhat = reg_b.predict(Q)
        ahat = reg_a.predict(Q).reshape(-1, self.d, self.d)
        ahat = 0.5 * (ahat + np.swapaxes(ahat, 1, 2))
        return bhat, ahat

    def to_table(self, x_values, feature_values=None):
        """Lookup rows (t, x, features, b̂, â) on a grid of states for each slice.

        Without feature_values each slice uses the mean conditioner of its training set.
        """
        rows = []
        x = np.asarray(x_values, dtype=float).reshape(-1, self.d)
        for k in sorted(self.slices):
            if feature_values is None:
                feats = self.slices[k][0].parameters['X'][:, self.d:].mean(axis=0)
            else:
                feats = np.asarray(feature_values, dtype=float)
            bhat, ahat = self.query(k * self.dt, x, feats)
            for i in range(x.shape[0]):
                rows.append([k * self.dt, *x[i], *np.broadcast_to(feats, (self.n_features,)), *bhat[i],
                             *ahat[i].ravel()])
        return np.asarray(rows)


def markovian_projection(samples, bandwidths=None, mode='conditional', dt=None,
                         min_samples=MIN_SLICE_SAMPLES, max_train=2000, seed=0):
    """Per-slice Nadaraya–Watson surfaces for b and a = σσᵀ + γγᵀ on (x, features)."""
    if mode not in ('conditional', 'classical'):
        raise ValidationError(f"unknown projection mode {mode!r}")
    if not samples:
        raise ValidationError("no samples to project")
    d = samples[0].x.shape[1]
    n_features = samples[0].features.shape[1]
    if dt is None:
        later = [s for s in samples if s.node > 0]
        dt = later[0].t / later[0].node if later else 1.0
    slices = {}
    used_bw = {}
    unusable = []
    for s in samples:
        if len(s) < min_samples:
            logger.warning(f"projection_slice_unusable node={s.node} samples={len(s)} min={min_samples}")
            unusable.append(s.node)
            continue
        feats = np.zeros_like(s.features) if mode == 'classical' else s.features
        X = np.hstack([s.x, feats])
        b, a = s.b, s.a.reshape(len(s), -1)
        if len(s) > max_train:
            keep = np.sort(np.random.default_rng([seed, s.node]).choice(len(s), size=max_train, replace=False))
            X, b, a = X[keep], b[keep], a[keep]
        reg_b = KernelRegression(bandwidths).fit(X, b)
        reg_a = KernelRegression(bandwidths).fit(X, a)
        slices[s.node] = (reg_b, reg_a)
        used_bw[s.node] = reg_b.parameters['h']
    logger.info(f"markovian_projection mode={mode} slices={len(slices)}/{len(samples)} features={n_features}")
    return ProjectedCoefficients(mode=mode, dt=dt, d=d, n_features=n_features, slices=slices,
                                 bandwidths=used_bw, unusable=tuple(unusable))


def tower_residuals(projected, samples):
    """Per-slice mean of b − b̂(own conditioners) and its standard error."""
    out = []
    for s in samples:
        if s.node not in projected.slices:
            continue
        reg_b, _ = projected.slices[s.node]
        feats = np.zeros_like(s.features) if projected.mode == 'classical' else s.features
        resid = s.b - reg_b.predict(np.hstack([s.x, feats]))
        out.append((s.node, resid.mean(axis=0), resid.std(axis=0, ddof=1) / math.sqrt(len(s))))
    return out


def psd_chain_defect(ahat, gamma):
    """Minimum eigenvalue of â − γγᵀ and the reconstruction error of the clipped chain."""
    gg = np.einsum('nik,njk->nij', gamma, gamma)
    diff = ahat - gg
    diff = 0.5 * (diff + np.swapaxes(diff, 1, 2))
    min_eig = float(np.linalg.eigvalsh(diff).min())
    root = psd_sqrt(diff)
    vals, vecs = np.linalg.eigh(diff)
    clipped = (vecs * np.clip(vals, 0.0, None)[:, None, :]) @ np.swapaxes(vecs, 1, 2) + gg
    err = float(np.max(np.abs(root @ root + gg - clipped)))
    return min_eig, err


# ------------------ Mimicked System ------------------
def simulate_mimicked(projected, gamma_hat, feature_map, init, scenario, N):
    """Conditional McKean–Vlasov system with drift b̂ and σ̂ = √(â − γ̂γ̂ᵀ)."""
    x0, dW, idx = draw_particle_noise(scenario, init, N)
    B = scenario.B
    clips = []

    def step(k, t, x):
        m = MeasureView.from_points(x)
        feats = feature_map(m) if projected.mode == 'conditional' else np.zeros(projected.n_features)
        bhat, ahat = projected.query(t, x, feats)
        g = gamma_hat.gamma(t, m, x, B[:k + 1])
        diff = ahat - np.einsum('nik,njk->nij', g, g)
        s, clip = psd_sqrt_with_clip(0.5 * (diff + np.swapaxes(diff, 1, 2)))
        clips.append(clip)
        return bhat, s, g

    states = euler_maruyama(step, x0, dW, scenario)
    if clips and max(clips) > 1e-8:
        logger.info(f"simulate_mimicked scenario={scenario.scenario_index} max_psd_clip={max(clips):.3e}")
    return ParticleEnsemble(scenario=scenario, states=states, dW=dW, w_seeds=idx)


# ------------------ Experiment ------------------
@dataclass(frozen=True)
class MimickingConfig:
    master_seed: int
    grid: object
    n_scenarios: int = 16
    n_particles: int = 300
    stride: int = 1
    mode: str = 'conditional'
    bandwidths: object = None
    feature_map: FeatureMap = field(default_factory=FeatureMap)
    check_times: tuple = (0.25, 0.5, 1.0)
    enrichment: FeatureMap = None
    max_train: int = 2000


@dataclass
class ComparisonReport:
    times: np.ndarray
    pooled_w1: np.ndarray
    battery: dict
    matched_w1: np.ndarray
    extrapolated: int
    fallbacks: int
    enrichment_sensitivity: float = None
    tower: list = field(default_factory=list)
    projected: ProjectedCoefficients = None

    def battery_within(self, n_se=3.0, slack=0.0):
        return all(abs(gap) <= n_se * se + slack for rows in self.battery.values() for gap, se in rows)

    def to_dict(self):
        return dict(times=self.times.tolist(), pooled_w1=self.pooled_w1.tolist(),
                    battery={k: [list(r) for r in v] for k, v in self.battery.items()},
                    matched_w1=self.matched_w1.tolist(), extrapolated=self.extrapolated,
                    fallbacks=self.fallbacks, enrichment_sensitivity=self.enrichment_sensitivity)


def _battery_stats(ensembles, k):
    per = np.array([[e.states[k][:, 0].mean(), (e.states[k][:, 0]**2).mean(),
                     e.states[k][:, 0].mean() * e.states[k][:, 0].mean()] for e in ensembles])
    return per.mean(axis=0), per.std(axis=0, ddof=1) / math.sqrt(len(ensembles))


def _pooled(ensembles, k):
    return MeasureView.from_points(np.concatenate([e.states[k] for e in ensembles]))


def _fit(config, runs, feature_map):
    nodes = sorted(runs[0][1])
    samples = harvest_samples(runs, feature_map, config.mode)
    projected = markovian_projection(samples, config.bandwidths, config.mode, dt=config.grid.dt,
                                     max_train=config.max_train, seed=config.master_seed)
    return samples, projected, nodes


def run_mimicking_experiment(original, init, config):
    grid = config.grid
    M, N = config.n_scenarios, config.n_particles
    harvest = range(0, grid.n_steps, config.stride)
    matched = [make_scenario(config.master_seed, s, grid, original.d) for s in range(M)]
    fresh = [make_scenario(config.master_seed, M + s, grid, original.d) for s in range(M)]
    runs = [simulate_original(original, init, sc, N, harvest) for sc in matched]
    samples, projected, _ = _fit(config, runs, config.feature_map)

    mimic_matched = [simulate_mimicked(projected, original.gamma_hat, config.feature_map, init, sc, N)
                     for sc in matched]
    mimic_fresh = [simulate_mimicked(projected, original.gamma_hat, config.feature_map, init, sc, N)
                   for sc in fresh]
    originals = [r[0] for r in runs]
    times = np.asarray([t for t in config.check_times if t <= grid.t_end + 1e-12])
    nodes = [grid.index_of(t) for t in times]
    pooled = np.array([wasserstein1_1d(_pooled(originals, k), _pooled(mimic_fresh, k)) for k in nodes])
    names = ('mean_x', 'mean_x2', 'mean_x_times_mean_mu')
    battery = {name: [] for name in names}
    for k in nodes:
        m1, se1 = _battery_stats(originals, k)
        m2, se2 = _battery_stats(mimic_fresh, k)
        for j, name in enumerate(names):
            battery[name].append((float(m1[j] - m2[j]), float(math.hypot(se1[j], se2[j]))))
    per_scenario = np.array([[wasserstein1_1d(o.view(k), mm.view(k)) for k in nodes]
                             for o, mm in zip(originals, mimic_matched)])

    sensitivity = None
    if config.enrichment is not None:
        _, enriched, _ = _fit(config, runs, config.enrichment)
        mimic_rich = [simulate_mimicked(enriched, original.gamma_hat, config.enrichment, init, sc, N)
                      for sc in fresh]
        rich = np.array([wasserstein1_1d(_pooled(originals, k), _pooled(mimic_rich, k)) for k in nodes])
        sensitivity = float(np.max(np.abs(rich - pooled)))

    report = ComparisonReport(times=times, pooled_w1=pooled, battery=battery, matched_w1=per_scenario,
                              extrapolated=projected.diagnostics['extrapolated'],
                              fallbacks=projected.diagnostics['fallbacks'],
                              enrichment_sensitivity=sensitivity,
                              tower=tower_residuals(projected, samples),
                              projected=projected)
    if report.extrapolated:
        logger.warning(f"mimicking_extrapolation queries={report.extrapolated}")
    logger.info(f"run_mimicking_experiment mode={config.mode} max_pooled_w1={pooled.max():.4f}")
    return report
