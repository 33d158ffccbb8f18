"""Wasserstein-2 estimators: exact assignment, debiased Sinkhorn, Bures, coupling cost."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp
from scipy.stats import norm

from .psd import NotPSDError, eigh, psd_sqrt, sym

ASSIGNMENT_CAP = 4096


class SinkhornDidNotConverge(RuntimeError):
    pass


@dataclass(frozen=True)
class W2Estimate:
    value: float
    ci_halfwidth: float
    method: str
    sizes: tuple

    def __post_init__(self):
        if self.value < 0 or self.ci_halfwidth < 0:
            raise ValueError("W2 estimate and CI must be nonnegative")


def _as2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def sq_cost(xs, ys) -> np.ndarray:
    xs, ys = _as2d(xs), _as2d(ys)
    c = np.sum(xs**2, 1)[:, None] + np.sum(ys**2, 1)[None, :] - 2 * xs @ ys.T
    return np.clip(c, 0.0, None)


def _exact_cost_matrix(xs, ys) -> np.ndarray:
    """Squared distances formed by differences (no cancellation)."""
    xs, ys = _as2d(xs), _as2d(ys)
    diff = xs[:, None, :] - ys[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def w2_exact_assignment(xs, ys, *, n_boot: int = 0, rng: np.random.Generator | None = None,
                        level: float = 0.95) -> W2Estimate:
    """Empirical W2 between two equal-size uniform samples via optimal matching.

    The CI is a bootstrap over the matched pairs (costs held fixed), which
    reflects the spread of the matched costs rather than re-solving the
    assignment for every replica.
    """
    xs, ys = _as2d(xs), _as2d(ys)
    k = len(xs)
    if len(ys) != k:
        raise ValueError("sample sizes differ")
    if k > ASSIGNMENT_CAP:
        raise ValueError(f"size {k} exceeds the exact-assignment cap; use w2_sinkhorn")
    C = _exact_cost_matrix(xs, ys)
    r, c = linear_sum_assignment(C)
    costs = C[r, c]
    val = math.sqrt(max(float(costs.mean()), 0.0))
    half = 0.0
    if n_boot:
        rng = rng or np.random.default_rng(0)
        reps = np.sqrt(np.array([costs[rng.integers(0, k, k)].mean() for _ in range(n_boot)]))
        lo, hi = np.quantile(reps, [(1 - level) / 2, (1 + level) / 2])
        half = float(max(hi - val, val - lo, 0.0))
    return W2Estimate(val, half, "exact-assignment", (k, k))


def w2_brute_force(xs, ys) -> float:
    """Exhaustive minimum over permutations; only for k <= 8."""
    xs, ys = _as2d(xs), _as2d(ys)
    k = len(xs)
    if k > 8:
        raise ValueError("brute force limited to 8 points")
    C = _exact_cost_matrix(xs, ys)
    best = min(sum(C[i, p[i]] for i in range(k)) for p in itertools.permutations(range(k)))
    return math.sqrt(best / k)


def _semidual(g: np.ndarray, C: np.ndarray, eps: float, la: float, lb: float):
    """Semi-dual value, log-plan and gradient for column potential g."""
    Z = (g[None, :] - C) / eps + lb
    lse = logsumexp(Z, axis=1)
    f = -eps * lse
    val = float(np.sum(np.exp(la) * f) + np.sum(np.exp(lb) * g))
    logP = Z - lse[:, None] + la
    grad = math.exp(lb) - np.exp(logsumexp(logP, axis=0))
    return val, logP, grad


def _sinkhorn_cost(C: np.ndarray, eps: float, max_iters: int, tol: float) -> float:
    """Entropic OT value <P, C> between uniform marginals.

    A few hundred log-domain Sinkhorn sweeps along a decreasing epsilon
    schedule give a warm start; damped Newton steps on the semi-dual then
    drive the L1 marginal violation below ``tol``.
    """
    n, m = C.shape
    la, lb = -math.log(n), -math.log(m)
    g = np.zeros(m)
    e = max(eps, float(C.max()))
    while True:
        for _ in range(30):
            f = -e * logsumexp((g[None, :] - C) / e + lb, axis=1)
            g = -e * logsumexp((f[:, None] - C) / e + la, axis=0)
        if e == eps:
            break
        e = max(eps, 0.5 * e)
    J = np.ones((m, m)) / m
    val, logP, grad = _semidual(g, C, eps, la, lb)
    for _ in range(max_iters):
        if np.sum(np.abs(grad)) < tol:
            return float(np.sum(np.exp(logP) * C))
        P = np.exp(logP)
        H = (P.T @ (P / np.exp(la)) - np.diag(P.sum(axis=0))) / eps - J
        mu = 1e-12 * max(1.0, float(np.max(np.abs(np.diag(H)))))
        step = np.linalg.lstsq(H - mu * np.eye(m), -grad, rcond=None)[0]
        t = 1.0
        while t > 1e-10:
            v2, lp2, g2 = _semidual(g + t * step, C, eps, la, lb)
            if v2 >= val + 1e-4 * t * float(grad @ step) or np.sum(np.abs(g2)) < np.sum(np.abs(grad)):
                break
            t *= 0.5
        g = g + t * step
        val, logP, grad = v2, lp2, g2
    raise SinkhornDidNotConverge(f"no convergence in {max_iters} Newton steps (eps={eps:.3g})")


def w2_sinkhorn(xs, ys, epsilon: float | None = None, max_iters: int = 200,
                tol: float = 1e-8) -> W2Estimate:
    """Debiased entropic estimate sqrt(OT(x,y) - OT(x,x)/2 - OT(y,y)/2).

    ``epsilon`` defaults to 0.05 times the median pairwise squared cost.
    """
    xs, ys = _as2d(xs), _as2d(ys)
    Cxy = _exact_cost_matrix(xs, ys)
    if epsilon is None:
        epsilon = 0.05 * float(np.median(Cxy))
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    v = (_sinkhorn_cost(Cxy, epsilon, max_iters, tol)
         - 0.5 * _sinkhorn_cost(_exact_cost_matrix(xs, xs), epsilon, max_iters, tol)
         - 0.5 * _sinkhorn_cost(_exact_cost_matrix(ys, ys), epsilon, max_iters, tol))
    return W2Estimate(math.sqrt(max(v, 0.0)), 0.0, "sinkhorn", (len(xs), len(ys)))


def w2_gaussian_closed_form(S1, S2) -> float:
    """Bures distance between centred Gaussians with covariances S1 and S2."""
    S1, S2 = sym(S1), sym(S2)
    for S in (S1, S2):
        lam, _ = eigh(S)
        if np.min(lam) < -1e-10 * max(1.0, float(np.max(np.abs(lam)))):
            raise NotPSDError("covariance is not PSD")
    r2 = psd_sqrt(S2)
    cross = psd_sqrt(sym(r2 @ S1 @ r2))
    val = float(np.trace(S1) + np.trace(S2) - 2 * np.trace(cross))
    return math.sqrt(max(val, 0.0))


def w2_upper_from_coupling(pairs, level: float = 0.95) -> W2Estimate:
    """sqrt(mean |s_n - g|^2) over coupled pairs, CLT interval via the delta method."""
    s = np.array([np.atleast_1d(p.s_n) for p in pairs])
    g = np.array([np.atleast_1d(p.g) for p in pairs])
    if len(s) < 100:
        raise ValueError("need at least 100 pairs")
    c = np.sum((s - g) ** 2, axis=1)
    mean = float(c.mean())
    se = float(c.std(ddof=1) / math.sqrt(len(c)))
    z = float(norm.ppf(0.5 + level / 2))
    val = math.sqrt(mean)
    half = z * se / (2 * val) if val > 0 else math.sqrt(z * se)
    return W2Estimate(val, half, "coupling", (len(c),))


def same_distribution_floor(sampler, k: int, rng: np.random.Generator, reps: int = 1) -> float:
    """Mean exact-assignment W2 between two independent k-samples of one law."""
    vals = [w2_exact_assignment(sampler(rng, k), sampler(rng, k)).value for _ in range(reps)]
    return float(np.mean(vals))


def w2_quantile_1d(support, probs, mean: float = 0.0, sd: float = 1.0) -> float:
    """Exact W2 between a 1-d discrete law and N(mean, sd^2) by quantile coupling.

    Each atom x with CDF interval [F-, F+] contributes
    int_{F-}^{F+} (x - mean - sd z(q))^2 dq, evaluated in closed form.
    """
    order = np.argsort(support)
    old = np.seterr(invalid="ignore")
    x = np.asarray(support, float)[order] - mean
    p = np.asarray(probs, float)[order]
    cum = np.concatenate([[0.0], np.cumsum(p)])
    cum[-1] = 1.0
    za = norm.ppf(np.clip(cum[:-1], 0, 1))
    zb = norm.ppf(np.clip(cum[1:], 0, 1))
    phi_a = np.where(np.isfinite(za), norm.pdf(za), 0.0)
    phi_b = np.where(np.isfinite(zb), norm.pdf(zb), 0.0)
    zphi_a = np.where(np.isfinite(za), za * phi_a, 0.0)
    zphi_b = np.where(np.isfinite(zb), zb * phi_b, 0.0)
    dP = p
    first = phi_a - phi_b
    second = dP - (zphi_b - zphi_a)
    np.seterr(**old)
    tot = np.sum(x * x * dP - 2 * x * sd * first + sd * sd * second)
    return math.sqrt(max(float(tot), 0.0))
