"""Mollified measures and coefficients, cutoff projections and their invariants.

Everything here produces tables on a one-dimensional grid rather than closures, so
the invariant checks can sweep every table point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.integrate import quad

from core import MeasureView, ValidationError
from labconfig import logger

DENOMINATOR_FLOOR = 1e-300


# ------------------ Mollifier Kernel ------------------
def _base(x):
    return np.exp(-np.sqrt(1.0 + x**2))


@lru_cache(maxsize=None)
def base_normalization():
    """∫ exp(−√(1+x²)) dx over the real line (equals 2·K₁(1))."""
    value, _ = quad(lambda x: math.exp(-math.sqrt(1.0 + x * x)), -np.inf, np.inf, epsabs=1e-13, epsrel=1e-13)
    return value


@dataclass(frozen=True)
class MollifierKernel:
    """ρ_n(x) = n·ρ(nx) with ρ ∝ exp(−√(1+x²)); M₁ = M₂ = 1 bound |ρ′| and |ρ″| by ρ."""
    n: float
    M1: float = 1.0
    M2: float = 1.0

    def __post_init__(self):
        if not self.n > 0:
            raise ValidationError("scale index n must be positive")

    def value(self, x):
        y = self.n * np.asarray(x, dtype=float)
        return self.n * _base(y) / base_normalization()

    def derivative(self, x):
        y = self.n * np.asarray(x, dtype=float)
        return -self.n**2 * y / np.sqrt(1.0 + y**2) * _base(y) / base_normalization()

    def second_derivative(self, x):
        y = self.n * np.asarray(x, dtype=float)
        r = 1.0 + y**2
        return self.n**3 * (y**2 / r - r**-1.5) * _base(y) / base_normalization()

    def derivative_domination(self, points):
        """Largest observed |ρ_n′|/(n·ρ_n) and |ρ_n″|/(n²·ρ_n) at the given points."""
        rho = self.value(points)
        ok = rho > 0
        r1 = np.abs(self.derivative(points))[ok] / (self.n * rho[ok])
        r2 = np.abs(self.second_derivative(points))[ok] / (self.n**2 * rho[ok])
        return float(r1.max(initial=0.0)), float(r2.max(initial=0.0))

    def normalization_error(self):
        total, _ = quad(lambda x: float(self.value(x)), -np.inf, np.inf, epsabs=1e-13, epsrel=1e-13)
        return abs(total - 1.0)


# ------------------ Smoothed Coefficients ------------------
@dataclass(frozen=True)
class MollifiedTables:
    n: float
    x: np.ndarray
    density: np.ndarray
    b: np.ndarray
    a: np.ndarray
    gamma: np.ndarray
    invalid: np.ndarray
    atom_b: np.ndarray
    atom_a: np.ndarray
    atom_gamma: np.ndarray
    atom_weights: np.ndarray
    dx: float
    db: np.ndarray = None

    def jensen_gap(self, p, form='drift'):
        """⟨μ*ρ_n, |c^{ρn}|^p⟩ − ⟨μ, |c|^p⟩ for c = b or a; nonpositive up to rounding."""
        table, atoms = (self.b, self.atom_b) if form == 'drift' else (self.a, self.atom_a)
        lhs = float(np.sum(self.density * np.abs(table)**p) * self.dx)
        rhs = float(self.atom_weights @ np.abs(atoms)**p)
        return lhs - rhs


def _atom_values(coeffs, mu, t, path):
    path = np.zeros((1, 1)) if path is None else path
    b, s, g = coeffs.evaluate(t, mu, mu.points, path)
    return b[:, 0], s[:, 0, 0]**2 + g[:, 0, 0]**2, g[:, 0, 0]


def smooth_coefficients(coeffs, mu, kernel, grid, t=0.0, path=None):
    """Ratios ((c·μ)*ρ_n)/(μ*ρ_n) on the grid centres for c = b, a, γ.

    Each atom's kernel column is normalised to unit mass on the grid, so the smoothed
    density keeps mass one and the Jensen bounds hold for the discrete tables too.
    """
    if mu.d != 1:
        raise ValidationError("mollified tables are one-dimensional")
    x = grid.centers
    dx = grid.dx
    atoms = mu.points[:, 0]
    kern = kernel.value(x[:, None] - atoms[None, :])
    dkern = kernel.derivative(x[:, None] - atoms[None, :])
    col = kern.sum(axis=0) * dx
    lost = col <= 0
    if lost.any():
        logger.warning(f"smooth_coefficients atoms_outside_window={int(lost.sum())} n={kernel.n}")
    scale = np.where(lost, 0.0, mu.weights / np.where(lost, 1.0, col))
    den = kern @ scale
    dden = dkern @ scale
    b, a, g = _atom_values(coeffs, mu, t, path)
    invalid = den < DENOMINATOR_FLOOR
    if invalid.any():
        logger.info(f"smooth_coefficients invalid_points={int(invalid.sum())} n={kernel.n}")
    safe = np.maximum(den, DENOMINATOR_FLOOR)
    tables = {}
    for name, vals in (('b', b), ('a', a), ('gamma', g)):
        tables[name] = (kern @ (scale * vals)) / safe
    db = ((dkern @ (scale * b)) - tables['b'] * dden) / safe
    return MollifiedTables(n=kernel.n, x=x, density=den, b=tables['b'], a=tables['a'], gamma=tables['gamma'],
                           invalid=invalid, atom_b=b, atom_a=a, atom_gamma=g, atom_weights=mu.weights,
                           dx=dx, db=db)


def consistency_path(coeffs, mu, grid, ns=(4, 16, 64), t=0.0, path=None):
    """⟨μ*ρ_n, |b^{ρn} − b|⟩ for each scale index; decreasing for continuous b."""
    out = []
    x = grid.centers[:, None]
    path = np.zeros((1, 1)) if path is None else path
    b_grid = coeffs.b(t, mu, x, path)[:, 0]
    for n in ns:
        tables = smooth_coefficients(coeffs, mu, MollifierKernel(n), grid, t, path)
        out.append(float(np.sum(tables.density * np.abs(tables.b - b_grid)) * grid.dx))
    return out


def c1_bound_check(tables, kernel):
    """sup|b^{ρn}| ≤ sup|b| and sup|∂x b^{ρn}| ≤ 2·n·M₁·sup|b| on the valid table points."""
    sup_b = float(np.max(np.abs(tables.atom_b), initial=0.0))
    valid = ~tables.invalid
    value_ok = float(np.max(np.abs(tables.b[valid]), initial=0.0)) <= sup_b * (1 + 1e-12) + 1e-300
    deriv = float(np.max(np.abs(tables.db[valid]), initial=0.0))
    bound = 2.0 * kernel.n * kernel.M1 * sup_b
    return value_ok and deriv <= bound * (1 + 1e-9) + 1e-300, deriv, bound


# ------------------ Cutoff ------------------
def _smoothstep(q):
    h = q**3 * (10.0 - 15.0 * q + 6.0 * q**2)
    dh = 30.0 * q**2 * (1.0 - q)**2
    d2h = 60.0 * q * (1.0 - q) * (1.0 - 2.0 * q)
    return h, dh, d2h


@dataclass(frozen=True)
class CutoffMap:
    """χ_R = 1 on |x| ≤ R, 0 on |x| ≥ 2R, quintic smoothstep in between.

    Bounds: |χ′| ≤ 1.875/R and |χ″| ≤ 5.774/R²; π^R(x) = χ_R(x)·x.
    """
    R: float

    def __post_init__(self):
        if not self.R > 0:
            raise ValidationError("cutoff radius must be positive")

    def _parts(self, x):
        x = np.asarray(x, dtype=float)
        r = np.abs(x)
        q = np.clip((r - self.R) / self.R, 0.0, 1.0)
        h, dh, d2h = _smoothstep(q)
        chi = 1.0 - h
        sign = np.sign(x)
        dchi = -dh / self.R * sign
        d2chi = -d2h / self.R**2
        return chi, dchi, d2chi

    def chi(self, x):
        return self._parts(x)[0]

    def pi(self, x):
        return self.chi(x) * np.asarray(x, dtype=float)

    def jacobian(self, x):
        chi, dchi, _ = self._parts(x)
        return dchi * np.asarray(x, dtype=float) + chi

    def hessian(self, x):
        _, dchi, d2chi = self._parts(x)
        return d2chi * np.asarray(x, dtype=float) + 2.0 * dchi


@dataclass(frozen=True)
class CutoffTables:
    R: float
    centers: np.ndarray
    populated: np.ndarray
    b: np.ndarray
    a: np.ndarray
    gamma: np.ndarray
    pushforward: MeasureView
    dx: float
    mass: np.ndarray = None
    atom_drift: np.ndarray = None
    atom_weights: np.ndarray = None

    def jensen_gap(self, p):
        """⟨μ^R, |b^R|^p⟩ − ⟨μ, |π′b + ½aπ″|^p⟩ over the populated bins; nonpositive up to rounding."""
        lhs = float(np.sum(self.mass[self.populated] * np.abs(self.b[self.populated])**p))
        rhs = float(self.atom_weights @ np.abs(self.atom_drift)**p)
        return lhs - rhs

    def lookup(self, y):
        idx = np.floor((np.asarray(y, dtype=float) - (self.centers[0] - 0.5 * self.dx)) / self.dx).astype(int)
        inside = (idx >= 0) & (idx < self.centers.size)
        idx = np.clip(idx, 0, self.centers.size - 1)
        valid = inside & self.populated[idx]
        return self.b[idx], self.a[idx], self.gamma[idx], valid


def cutoff_projection(coeffs, mu, R, dx, t=0.0, path=None):
    """Binned conditional averages b^R = E[π′b + ½aπ″ | π(X)], a^R = E[π′²a | π(X)],
    γ^R = E[π′γ | π(X)] and the pushforward μ^R = μ∘π⁻¹."""
    if mu.d != 1:
        raise ValidationError("cutoff projection is one-dimensional")
    cut = CutoffMap(R)
    x = mu.points[:, 0]
    w = mu.weights
    b, a, g = _atom_values(coeffs, mu, t, path)
    y = cut.pi(x)
    d1 = cut.jacobian(x)
    d2 = cut.hessian(x)
    half = 2.0 * R + dx
    n_bins = int(math.ceil(2.0 * half / dx))
    edges_lo = -0.5 * n_bins * dx
    centers = edges_lo + (np.arange(n_bins) + 0.5) * dx
    idx = np.clip(np.floor((y - edges_lo) / dx).astype(int), 0, n_bins - 1)
    mass = np.bincount(idx, weights=w, minlength=n_bins)
    populated = mass > 0
    safe = np.where(populated, mass, 1.0)

    def average(vals):
        return np.where(populated, np.bincount(idx, weights=w * vals, minlength=n_bins) / safe, np.nan)

    drift = d1 * b + 0.5 * a * d2
    tables = CutoffTables(R=R, centers=centers, populated=populated,
                          b=average(drift), a=average(d1**2 * a), gamma=average(d1 * g),
                          pushforward=MeasureView(y[:, None], w), dx=dx,
                          mass=mass, atom_drift=drift, atom_weights=w)
    logger.info(f"cutoff_projection R={R} bins={int(populated.sum())}/{n_bins}")
    return tables


# ------------------ PSD Defect ------------------
@dataclass(frozen=True)
class PsdDefectReport:
    min_eigenvalue: float
    argmin: int
    n_points: int

    def passed(self, tol=1e-8):
        return self.min_eigenvalue >= -tol


def check_psd_defect(a_table, gamma_table, mask=None):
    """Minimum eigenvalue of a − γγᵀ over all table points (scalars or d×d stacks)."""
    a = np.asarray(a_table, dtype=float)
    g = np.asarray(gamma_table, dtype=float)
    if a.shape != g.shape:
        raise ValidationError(f"table shapes differ: {a.shape} vs {g.shape}")
    if a.ndim == 1:
        defect = a - g**2
    elif a.ndim == 3:
        mat = a - np.einsum('nik,njk->nij', g, g)
        defect = np.linalg.eigvalsh(0.5 * (mat + np.swapaxes(mat, 1, 2))).min(axis=1)
    else:
        raise ValidationError("tables must be (n,) or (n, d, d)")
    keep = np.isfinite(defect) if mask is None else (np.asarray(mask, dtype=bool) & np.isfinite(defect))
    if not keep.any():
        raise ValidationError("no valid table points")
    vals = np.where(keep, defect, np.inf)
    j = int(np.argmin(vals))
    return PsdDefectReport(min_eigenvalue=float(vals[j]), argmin=j, n_points=int(keep.sum()))
