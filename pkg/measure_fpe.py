"""Fokker–Planck equation on the space of measures.

Cylindrical functionals F(m) = f(⟨m,φ_1⟩, …, ⟨m,φ_K⟩), their Lions derivatives,
the generator M_t F and the residual checks run over scenario ensembles, which stand
in for the law of the conditional measure flow.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from core import (MeasureView, NonFiniteStateError, ScenarioMismatchError, ValidationError,
                  lift, wasserstein1_1d)
from labconfig import logger

EXACT_PAIR_LIMIT = 2000
SUBSAMPLED_PAIRS = 1_000_000


# ------------------ Cylindrical Functionals ------------------
@dataclass(frozen=True)
class CylindricalFunctional:
    f: Callable
    grad: Callable
    hess: Callable
    basis: object
    functional_id: str = 'custom'

    def features(self, m):
        return lift(m, self.basis)

    def __call__(self, m):
        return float(self.f(self.features(m)))


def linear_functional(basis, weights=None, functional_id='linear'):
    K = len(basis)
    c = np.ones(K) if weights is None else np.asarray(weights, dtype=float)
    return CylindricalFunctional(lambda z: c @ z, lambda z: c.copy(), lambda z: np.zeros((K, K)),
                                 basis, functional_id)


def constant_functional(basis, value=1.0):
    K = len(basis)
    return CylindricalFunctional(lambda z: value, lambda z: np.zeros(K), lambda z: np.zeros((K, K)),
                                 basis, 'constant')


def square_functional(basis, i=0):
    K = len(basis)

    def grad(z):
        g = np.zeros(K)
        g[i] = 2.0 * z[i]
        return g

    def hess(z):
        h = np.zeros((K, K))
        h[i, i] = 2.0
        return h
    return CylindricalFunctional(lambda z: z[i]**2, grad, hess, basis, f'square_{i}')


def product_functional(basis, i=0, j=1):
    K = len(basis)

    def grad(z):
        g = np.zeros(K)
        g[i] += z[j]
        g[j] += z[i]
        return g

    def hess(z):
        h = np.zeros((K, K))
        h[i, j] += 1.0
        h[j, i] += 1.0
        return h
    return CylindricalFunctional(lambda z: z[i] * z[j], grad, hess, basis, f'product_{i}_{j}')


def exponential_functional(basis, i=0):
    K = len(basis)

    def grad(z):
        g = np.zeros(K)
        g[i] = math.exp(z[i])
        return g

    def hess(z):
        h = np.zeros((K, K))
        h[i, i] = math.exp(z[i])
        return h
    return CylindricalFunctional(lambda z: math.exp(z[i]), grad, hess, basis, f'exp_{i}')


def sine_functional(basis, i=0):
    K = len(basis)

    def grad(z):
        g = np.zeros(K)
        g[i] = math.cos(z[i])
        return g

    def hess(z):
        h = np.zeros((K, K))
        h[i, i] = -math.sin(z[i])
        return h
    return CylindricalFunctional(lambda z: math.sin(z[i]), grad, hess, basis, f'sin_{i}')


def functional_battery(basis):
    """Six cylindrical functionals: two linear, square, product, exponential and sine."""
    K = len(basis)
    j = 1 if K > 1 else 0
    alternating = np.array([(-1.0)**i for i in range(K)])
    return [
        linear_functional(basis, np.eye(K)[0], 'linear_0'),
        linear_functional(basis, alternating, 'linear_alternating'),
        square_functional(basis, 0),
        product_functional(basis, 0, j),
        exponential_functional(basis, 0),
        sine_functional(basis, j),
    ]


# ------------------ Lions Derivatives ------------------
@dataclass(frozen=True)
class LionsDerivatives:
    dm: np.ndarray
    d2m: np.ndarray
    dvdm: np.ndarray


def lions_derivatives(F, m, v, v_prime):
    z = F.features(m)
    g = np.asarray(F.grad(z), dtype=float)
    H = np.asarray(F.hess(z), dtype=float)
    _, grad_v, hess_v = F.basis.evaluate(np.reshape(v, (1, -1)))
    _, grad_vp, _ = F.basis.evaluate(np.reshape(v_prime, (1, -1)))
    dm = np.einsum('k,kd->d', g, grad_v[0])
    d2m = np.einsum('ij,id,je->de', H, grad_v[0], grad_vp[0])
    dvdm = np.einsum('k,kde->de', g, hess_v[0])
    return LionsDerivatives(dm=dm, d2m=d2m, dvdm=dvdm)


def flat_derivative_quotient(F, m, m_prime, h):
    """Difference quotient (F(m + h(m′ − m)) − F(m))/h and the exact ∫∂_mF d(m′ − m)."""
    if not 0 < h <= 1:
        raise ValidationError("h must lie in (0, 1]")
    mixed = MeasureView(np.vstack([m.points, m_prime.points]),
                        np.concatenate([(1.0 - h) * m.weights, h * m_prime.weights]))
    quotient = (F(mixed) - F(m)) / h
    g = np.asarray(F.grad(F.features(m)))
    exact = float(g @ (lift(m_prime, F.basis) - lift(m, F.basis)))
    return quotient, exact


# ------------------ Generator ------------------
def _atom_coefficients(coeffs, t, m, path):
    x = m.points
    b, s, g = coeffs.evaluate(t, m, x, path)
    for name, arr in (('drift', b), ('sigma', s), ('gamma', g)):
        if not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr).reshape(arr.shape[0], -1).all(axis=1))[0])
            logger.error(f"generator_non_finite coefficient={name} atom={bad} t={t}")
            raise NonFiniteStateError(None, name, f"atom={bad} x={x[bad].tolist()} t={t}")
    a = np.einsum('nik,njk->nij', s, s) + np.einsum('nik,njk->nij', g, g)
    return b, a, g


def _default_path(m, path):
    return np.zeros((1, m.d)) if path is None else path


def generator_M(F, t, m, coeffs, path=None, pair_mode='factorized', rng=None):
    """M_tF(m) = ∫[D_mF·b + ½ D_vD_mF : a] dm + ½ ∫∫ D²_mF : γ(v)γ(v′)ᵀ dm dm.

    pair_mode 'factorized' uses the rank structure of D²_mF for cylindrical F;
    'pairs' sums over atom pairs, exactly up to 2000 atoms and over 10⁶ sampled
    pairs above.
    """
    path = _default_path(m, path)
    z = F.features(m)
    g = np.asarray(F.grad(z), dtype=float)
    H = np.asarray(F.hess(z), dtype=float)
    b, a, gam = _atom_coefficients(coeffs, t, m, path)
    _, grads, hess = F.basis.evaluate(m.points)
    dm = np.einsum('k,nkd->nd', g, grads)
    dvdm = np.einsum('k,nkde->nde', g, hess)
    first = m.weights @ (np.einsum('nd,nd->n', dm, b) + 0.5 * np.einsum('nde,nde->n', dvdm, a))
    # U[n, i] = γ(x_n)ᵀ ∇φ_i(x_n)
    U = np.einsum('nkr,nik->nir', gam, grads)
    if pair_mode == 'factorized':
        u = np.einsum('n,nir->ir', m.weights, U)
        second = 0.5 * np.einsum('ij,ir,jr->', H, u, u)
    elif pair_mode == 'pairs':
        V = np.einsum('ij,mjr->mir', H, U)
        n = m.points.shape[0]
        if n <= EXACT_PAIR_LIMIT:
            S = np.einsum('nir,mir->nm', U, V)
            second = 0.5 * float(m.weights @ S @ m.weights)
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            p = m.weights / m.weights.sum()
            left = rng.choice(n, size=SUBSAMPLED_PAIRS, p=p)
            right = rng.choice(n, size=SUBSAMPLED_PAIRS, p=p)
            total = 0.0
            for start in range(0, SUBSAMPLED_PAIRS, 100_000):
                lb, rb = left[start:start + 100_000], right[start:start + 100_000]
                total += float(np.einsum('pir,pir->', U[lb], V[rb]))
            second = 0.5 * m.mass**2 * total / SUBSAMPLED_PAIRS
    else:
        raise ValidationError(f"unknown pair_mode {pair_mode!r}")
    return float(first + second)


def cylindrical_integrand(F, t, m, coeffs, path=None):
    """Σ_i ∂_i f ⟨m, Lφ_i⟩ + ½ Σ_ij ∂_ij f ⟨m, ∇φ_iᵀγ⟩·⟨m, ∇φ_jᵀγ⟩, one test function at a time."""
    path = _default_path(m, path)
    z = F.features(m)
    g = np.asarray(F.grad(z), dtype=float)
    H = np.asarray(F.hess(z), dtype=float)
    b, a, gam = _atom_coefficients(coeffs, t, m, path)
    K = len(F.basis)
    generator_terms = np.empty(K)
    transport = np.empty((K, m.d))
    for i, phi in enumerate(F.basis):
        _, grad_i, hess_i = phi.evaluate(m.points)
        l_phi = np.sum(b * grad_i, axis=1) + 0.5 * np.trace(a @ hess_i, axis1=1, axis2=2)
        generator_terms[i] = m.weights @ l_phi
        transport[i] = m.weights @ np.einsum('nkr,nk->nr', gam, grad_i)
    total = float(g @ generator_terms)
    for i in range(K):
        for j in range(K):
            if H[i, j] != 0.0:
                total += 0.5 * H[i, j] * float(transport[i] @ transport[j])
    return total


def compare_generator_forms(F, t, m, coeffs, path=None, rel_tol=1e-12):
    """Both code paths and whether they agree to rel_tol of the absolute scale."""
    lhs = generator_M(F, t, m, coeffs, path)
    rhs = cylindrical_integrand(F, t, m, coeffs, path)
    scale = max(abs(lhs), abs(rhs), 1e-300)
    return lhs, rhs, abs(lhs - rhs) <= rel_tol * scale + 1e-15


# ------------------ Scenario Ensembles ------------------
@dataclass(frozen=True)
class ScenarioEnsembleSummary:
    """Features and low moments per scenario and stored node.

    sources are the particle ensembles or grid flows the summary was built from; the
    generator needs the full measures, which stay there.
    """
    basis: object
    sources: tuple
    node_indices: np.ndarray
    times: np.ndarray
    features: np.ndarray
    moments: np.ndarray

    @property
    def M(self):
        return len(self.sources)

    def view(self, s, j):
        return self.sources[s].view(int(self.node_indices[j]))

    def path(self, s, j):
        return self.sources[s].scenario.B[:int(self.node_indices[j]) + 1]


def summarize(sources, basis, stride=1):
    sources = tuple(sources)
    if len(sources) < 2:
        raise ValidationError("a scenario ensemble summary needs M >= 2 scenarios")
    grid = sources[0].scenario.grid
    nodes = np.arange(0, grid.n_nodes, stride)
    if nodes[-1] != grid.n_steps:
        nodes = np.append(nodes, grid.n_steps)
    features = np.empty((len(sources), nodes.size, len(basis)))
    moments = np.empty((len(sources), nodes.size, 2))
    for s, src in enumerate(sources):
        if src.scenario.grid != grid:
            raise ValidationError("all scenarios of a summary must share one time grid")
        for j, k in enumerate(nodes):
            m = src.view(int(k))
            features[s, j] = lift(m, basis)
            moments[s, j] = (m.moment(1)[0], m.moment(2)[0])
    if not np.all(np.isfinite(features)):
        raise ValidationError("non-finite feature values in scenario summary")
    logger.info(f"summarize scenarios={len(sources)} nodes={nodes.size} K={len(basis)}")
    return ScenarioEnsembleSummary(basis=basis, sources=sources, node_indices=nodes,
                                   times=grid.nodes[nodes], features=features, moments=moments)


@dataclass(frozen=True)
class FpeResidualReport:
    functional_id: str
    times: np.ndarray
    residual: np.ndarray
    stderr: np.ndarray

    def within(self, n_se=3.0, slack=0.0):
        return bool(np.all(np.abs(self.residual) <= n_se * self.stderr + slack))

    def as_records(self):
        return [dict(functional_id=self.functional_id, t=float(t), residual=float(r), stderr=float(e))
                for t, r, e in zip(self.times, self.residual, self.stderr)]


def scenario_residuals(summary, F, coeffs):
    """Per-scenario Y^s(t_j) = F(μ_j) − F(μ_0) − Σ_{l<j} M F(μ_l) Δt."""
    M, n_t = summary.M, summary.times.size
    values = np.empty((M, n_t))
    gens = np.empty((M, n_t))
    dt = np.diff(summary.times)
    for s in range(M):
        for j in range(n_t):
            m = summary.view(s, j)
            values[s, j] = F(m)
            if j < n_t - 1:
                gens[s, j] = generator_M(F, summary.times[j], m, coeffs, summary.path(s, j))
    Y = np.zeros((M, n_t))
    Y[:, 1:] = values[:, 1:] - values[:, :1] - np.cumsum(gens[:, :-1] * dt, axis=1)
    return Y


def fpe_residual(summary, F, coeffs):
    Y = scenario_residuals(summary, F, coeffs)
    residual = Y.mean(axis=0)
    stderr = Y.std(axis=0, ddof=1) / math.sqrt(summary.M)
    if summary.M < 30:
        logger.warning(f"fpe_residual scenarios={summary.M} below 30; standard errors are rough")
    logger.info(f"fpe_residual functional={F.functional_id} end={residual[-1]:.3e} se={stderr[-1]:.3e}")
    return FpeResidualReport(F.functional_id, summary.times, residual, stderr)


def lifted_sde_residual(summary, basis_index, scenario, coeffs):
    """Pathwise Z_t − Z_0 − ∫⟨μ,Lφ_i⟩ds − ∫⟨μ,∇φ_iᵀγ⟩dB for the scenario's own measure path.

    The stochastic integral carries its second-order term ½⟨μ, γᵀ∇²φ_i γ⟩ : (ΔBΔBᵀ − Δt·I)
    with γ frozen at the left node, so conforming runs leave O(dt) + particle error.
    """
    match = [s for s, src in enumerate(summary.sources)
             if (src.scenario.master_seed, src.scenario.scenario_index)
             == (scenario.master_seed, scenario.scenario_index)]
    if not match or not np.array_equal(summary.sources[match[0]].scenario.increments, scenario.increments):
        raise ScenarioMismatchError(f"scenario {scenario.scenario_index} is not part of the summary")
    s = match[0]
    phi = summary.basis[basis_index]
    nodes = summary.node_indices
    B = scenario.B
    drift = np.empty(nodes.size - 1)
    noise = np.empty(nodes.size - 1)
    second = np.empty(nodes.size - 1)
    for j in range(nodes.size - 1):
        m = summary.view(s, j)
        b, a, gam = _atom_coefficients(coeffs, summary.times[j], m, summary.path(s, j))
        _, grad, hess = phi.evaluate(m.points)
        l_phi = np.sum(b * grad, axis=1) + 0.5 * np.trace(a @ hess, axis1=1, axis2=2)
        step = summary.times[j + 1] - summary.times[j]
        dB = B[nodes[j + 1]] - B[nodes[j]]
        drift[j] = (m.weights @ l_phi) * step
        transport = m.weights @ np.einsum('nkr,nk->nr', gam, grad)
        noise[j] = transport @ dB
        curvature = np.einsum('n,nqr->qr', m.weights, np.einsum('nkq,nkl,nlr->nqr', gam, hess, gam))
        second[j] = 0.5 * (dB @ curvature @ dB - step * np.trace(curvature))
    z = summary.features[s, :, basis_index]
    residual = np.zeros(nodes.size)
    residual[1:] = z[1:] - z[0] - np.cumsum(drift + noise + second)
    return residual


# ------------------ Stochastic Fubini ------------------
@dataclass(frozen=True)
class FubiniReport:
    b_lhs: float
    b_rhs: float
    b_gap: float
    b_stderr: float
    w_mean: float
    w_stderr: float


def stochastic_fubini_check(ensemble, r_index, s_index, integrand='state'):
    """Both identities for η = Z·1_[r,s] with Z a function of X_r.

    integrand is 'one', 'state' (Z = X_r) or a callable mapping the states at r and
    the B path up to r to one bounded value per particle.

    Conditioning on the common noise is the cross-particle mean of one scenario, and ΔB
    is the same for every particle, so b_gap is zero up to rounding by construction.
    b_stderr is the Monte Carlo error of b_lhs, the spread of Z·ΔB over particles; it
    is not an uncertainty of b_gap. w_stderr is the error of w_mean, the quantity the
    W identity tests.
    """
    if not 0 <= r_index < s_index <= ensemble.n_nodes - 1:
        raise ValidationError("need 0 <= r < s <= n_steps")
    x_r = ensemble.states[r_index][:, 0]
    B = ensemble.scenario.B[:, 0]
    if integrand == 'one':
        Z = np.ones_like(x_r)
    elif integrand == 'state':
        Z = x_r
    else:
        Z = np.asarray(integrand(ensemble.states[r_index], ensemble.scenario.B[:r_index + 1]), dtype=float)
    dB = B[s_index] - B[r_index]
    dW = ensemble.dW[:, r_index:s_index, 0].sum(axis=1)
    N = Z.size
    lhs = float(np.mean(Z * dB))
    rhs = float(Z.mean() * dB)
    b_se = float(np.std(Z * dB, ddof=1) / math.sqrt(N))
    w_terms = Z * dW
    return FubiniReport(b_lhs=lhs, b_rhs=rhs, b_gap=lhs - rhs, b_stderr=b_se,
                        w_mean=float(w_terms.mean()), w_stderr=float(w_terms.std(ddof=1) / math.sqrt(N)))


# ------------------ Lift ------------------
def feature_separation(m1, m2, basis):
    """W₁ distance of two one-dimensional measures and the max-norm gap of their lifts."""
    return wasserstein1_1d(m1, m2), float(np.max(np.abs(lift(m1, basis) - lift(m2, basis))))
