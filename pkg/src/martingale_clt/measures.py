"""Finitely supported measures, 1-d log-concave densities and particle clouds."""

from __future__ import annotations

import itertools
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import integrate

from .psd import inverse_sqrt, sym

WEIGHT_TOL = 1e-12
DEFAULT_MAX_ATOMS = 200_000
CDF_NODES = 2**14


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Atoms (N, d) with probability weights (N,).

    Build through :meth:`from_atoms`, which merges duplicate atoms.  ``density``
    is set when the atoms are a particle cloud of a product of a continuous
    1-d law; the entropy code uses it to tell clouds from genuinely discrete
    inputs.
    """

    atoms: np.ndarray
    weights: np.ndarray
    density: "Density1d | None" = None
    name: str = ""

    def __post_init__(self):
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if atoms.shape[0] != w.shape[0]:
            raise ValueError("atoms and weights differ in length")
        if not (np.all(np.isfinite(atoms)) and np.all(np.isfinite(w))):
            raise ValueError("non-finite atom or weight")
        if np.any(w < 0):
            raise ValueError("negative weight")
        total = w.sum()
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {total!r}, expected 1")
        w = w / total
        atoms.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_atoms(cls, atoms, weights=None, *, density=None, name: str = "",
                   normalize: bool = False) -> "DiscreteMeasure":
        atoms = np.asarray(atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        if weights is None:
            weights = np.full(len(atoms), 1.0 / len(atoms))
        weights = np.asarray(weights, dtype=float)
        if normalize:
            weights = weights / weights.sum()
        uniq, inv = np.unique(atoms, axis=0, return_inverse=True)
        if len(uniq) != len(atoms):
            weights = np.bincount(inv.reshape(-1), weights=weights, minlength=len(uniq))
            atoms = uniq
        return cls(atoms, weights, density=density, name=name)

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def is_particle_cloud(self) -> bool:
        return self.density is not None

    def to_json(self) -> str:
        return json.dumps({"dim": self.dim, "atoms": self.atoms.tolist(),
                           "weights": self.weights.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "DiscreteMeasure":
        doc = json.loads(text)
        m = cls.from_atoms(np.asarray(doc["atoms"], dtype=float).reshape(-1, int(doc["dim"])),
                           doc["weights"])
        return m

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DiscreteMeasure":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class MeasureMoments:
    mean: np.ndarray
    cov: np.ndarray
    radius: float


def moments(m: DiscreteMeasure) -> MeasureMoments:
    w, X = m.weights, m.atoms
    mean = w @ X
    Xc = X - mean
    cov = sym((Xc * w[:, None]).T @ Xc)
    radius = float(np.max(np.linalg.norm(X, axis=1)))
    return MeasureMoments(mean, cov, radius)


def point_mass(x) -> DiscreteMeasure:
    return DiscreteMeasure.from_atoms(np.atleast_2d(np.asarray(x, dtype=float)), [1.0],
                                      name="point-mass")


def two_point(beta: float = 1.0, d: int = 1) -> DiscreteMeasure:
    """Symmetric two-point law on {-beta e1, +beta e1}."""
    e = np.zeros(d)
    e[0] = beta
    return DiscreteMeasure.from_atoms(np.stack([-e, e]), [0.5, 0.5], name=f"two-point(beta={beta})")


def make_lattice_ball(d: int, beta: float, radius_in_steps: int,
                      max_atoms: int = DEFAULT_MAX_ATOMS) -> DiscreteMeasure:
    """Uniform law on the points of beta*Z^d within ``radius_in_steps`` lattice steps."""
    if d < 1 or beta <= 0:
        raise ValueError("need d >= 1 and beta > 0")
    r = int(radius_in_steps)
    if (2 * r + 1) ** d > 50 * max_atoms:
        raise ValueError("lattice enumeration too large for the atom cap")
    pts = [k for k in itertools.product(range(-r, r + 1), repeat=d) if sum(c * c for c in k) <= r * r]
    if len(pts) > max_atoms:
        raise ValueError(f"{len(pts)} lattice points exceed the cap of {max_atoms}")
    X = beta * np.asarray(pts, dtype=float)
    X = X - X.mean(axis=0)
    return DiscreteMeasure.from_atoms(X, name=f"lattice(d={d},beta={beta},r={r})")


def isotropize(m: DiscreteMeasure) -> DiscreteMeasure:
    """Affine image x -> cov^{-1/2}(x - mean) with mean 0 and identity covariance."""
    mom = moments(m)
    lam = np.linalg.eigvalsh(mom.cov)
    if lam[0] <= 1e-10:
        raise ValueError("covariance is singular; reduce the dimension first")
    W = inverse_sqrt(mom.cov)
    X = (m.atoms - mom.mean) @ W.T
    return DiscreteMeasure(X, m.weights, density=m.density, name=m.name + "+iso")


def center(m: DiscreteMeasure) -> DiscreteMeasure:
    """Translate so the mean is exactly zero (up to rounding)."""
    X = m.atoms - m.weights @ m.atoms
    return DiscreteMeasure(X, m.weights, density=m.density, name=m.name)


def sample(m: DiscreteMeasure, rng: np.random.Generator, k: int) -> np.ndarray:
    """k iid draws from m, shape (k, d)."""
    idx = rng.choice(m.size, size=int(k), p=m.weights)
    return m.atoms[idx]


# --------------------------------------------------------------------------
# 1-d densities


@dataclass(frozen=True, eq=False)
class Density1d:
    """Density proportional to exp(-potential(u)) on [lo, hi].

    ``modulus`` is the declared lower bound on potential''; it is checked on
    a grid of 10^3 points at construction.
    """

    potential: Callable[[np.ndarray], np.ndarray]
    modulus: float
    lo: float
    hi: float
    name: str = "custom"
    params: tuple = ()
    normalization: float = field(init=False)
    _x: np.ndarray = field(init=False, repr=False)
    _cdf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ValueError("empty support")
        g = np.linspace(self.lo, self.hi, 1002)
        h = g[1] - g[0]
        phi = self.potential(g)
        second = (phi[2:] - 2 * phi[1:-1] + phi[:-2]) / h**2
        if np.any(second < self.modulus - 1e-4 * max(1.0, abs(self.modulus))):
            raise ValueError("potential violates the declared convexity modulus")
        z_quad, _ = integrate.quad(lambda u: math.exp(-float(self.potential(np.array([u]))[0])),
                                   self.lo, self.hi, epsabs=0.0, epsrel=1e-13, limit=500)
        x = np.linspace(self.lo, self.hi, CDF_NODES + 1)
        dens = np.exp(-self.potential(x))
        z_grid = integrate.simpson(dens, x=x)
        if abs(z_grid - z_quad) > 1e-8 * z_quad:
            raise ValueError(f"normalization did not converge: {z_grid} vs {z_quad}")
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(x))])
        cdf /= cdf[-1]
        object.__setattr__(self, "normalization", z_quad)
        object.__setattr__(self, "_x", x)
        object.__setattr__(self, "_cdf", cdf)

    def pdf(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        inside = (u >= self.lo) & (u <= self.hi)
        out = np.zeros_like(u)
        out[inside] = np.exp(-self.potential(u[inside])) / self.normalization
        return out

    def ppf(self, q) -> np.ndarray:
        return np.interp(q, self._cdf, self._x)

    def moment(self, k: int) -> float:
        x = self._x
        return float(integrate.simpson(x**k * self.pdf(x), x=x))

    @property
    def mean(self) -> float:
        return self.moment(1)

    @property
    def variance(self) -> float:
        mu = self.mean
        return self.moment(2) - mu * mu


def gauss(var: float = 1.0, half_width: float | None = None) -> Density1d:
    """N(0, var), optionally truncated to |u| <= half_width."""
    hw = half_width if half_width is not None else 13.0 * math.sqrt(var)
    return Density1d(lambda u: 0.5 * np.asarray(u) ** 2 / var, 1.0 / var, -hw, hw,
                     name="gauss", params=(var,) if half_width is None else (var, half_width))


def _logcosh(u):
    au = np.abs(u)
    return au + np.log1p(np.exp(-2 * au)) - math.log(2.0)


def gauss_logcosh(a: float = 2.0, shift: float = 0.0) -> Density1d:
    """Potential u^2/2 + a*log(cosh(u - shift)), recentred to mean zero.

    1-uniformly log-concave for a >= 0; a nonzero shift breaks the symmetry
    so the third cumulant does not vanish.
    """
    if a < 0:
        raise ValueError("a must be nonnegative")

    def phi(u):
        u = np.asarray(u, dtype=float)
        return 0.5 * u * u + a * _logcosh(u - shift)

    f = Density1d(phi, 1.0, -13.0 + shift, 13.0 + shift, name="gauss_logcosh", params=(a, shift))
    return centered(f) if shift else f


def centered(f: Density1d) -> Density1d:
    """The law of U - E[U] for U ~ f."""
    mu = f.mean
    pot = f.potential
    return Density1d(lambda u: pot(np.asarray(u, dtype=float) + mu), f.modulus, f.lo - mu, f.hi - mu,
                     name=f.name, params=f.params)


def uniform(half_width: float = math.sqrt(3.0)) -> Density1d:
    """Uniform law on [-half_width, half_width] (log-concave, modulus 0)."""
    return Density1d(lambda u: np.zeros_like(np.asarray(u, dtype=float)), 0.0, -half_width, half_width,
                     name="uniform", params=(half_width,))


_DENSITIES = {"gauss": gauss, "gauss_logcosh": gauss_logcosh, "uniform": uniform}


def density_from_spec(spec: str) -> Density1d:
    """Parse "gauss", "gauss(0.64)", "gauss_logcosh(2)", "uniform(1.732)"."""
    mt = re.fullmatch(r"\s*(\w+)\s*(?:\((.*)\))?\s*", spec)
    if not mt or mt.group(1) not in _DENSITIES:
        raise ValueError(f"unknown density {spec!r}")
    args = [float(s) for s in mt.group(2).split(",")] if mt.group(2) else []
    return _DENSITIES[mt.group(1)](*args)


def particle_cloud_product(f: Density1d, d: int, N: int, rng: np.random.Generator,
                           method: str = "iid") -> DiscreteMeasure:
    """N-particle approximation of the product law f^{(x)d} by inverse-CDF sampling.

    ``method="iid"`` draws iid uniforms; ``method="stratified"`` uses a Latin
    hypercube so every coordinate marginal is exactly stratified.
    """
    if N < 2:
        raise ValueError("need at least two particles")
    if method == "iid":
        q = rng.random((N, d))
    elif method == "stratified":
        q = np.empty((N, d))
        for j in range(d):
            q[:, j] = (rng.permutation(N) + rng.random(N)) / N
    else:
        raise ValueError(f"unknown method {method!r}")
    X = f.ppf(q)
    return DiscreteMeasure(X, np.full(N, 1.0 / N), density=f,
                           name=f"cloud({f.name}{f.params},d={d},N={N})")
