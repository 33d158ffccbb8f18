"""Small statistical helpers shared by the experiments."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as _st


def wilson_interval(k, n, level: float = 0.99) -> tuple[np.ndarray, np.ndarray]:
    """Wilson score interval for a binomial proportion k/n."""
    k = np.asarray(k, dtype=float)
    z = _st.norm.ppf(0.5 + level / 2)
    p = k / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return np.clip(centre - half, 0, 1), np.clip(centre + half, 0, 1)


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    stderr: float

    def within(self, lo: float, hi: float) -> bool:
        return lo <= self.slope <= hi


def loglog_slope(x, y) -> SlopeFit:
    """Least-squares slope of log y against log x."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    r = _st.linregress(lx, ly)
    return SlopeFit(float(r.slope), float(r.intercept), float(r.stderr))


def chisquare_pvalue(counts, probs) -> float:
    """Goodness of fit; cells with expected count below 5 are pooled."""
    counts = np.asarray(counts, dtype=float)
    exp = np.asarray(probs, dtype=float) * counts.sum()
    order = np.argsort(exp)
    c, e = counts[order], exp[order]
    pc, pe, acc_c, acc_e = [], [], 0.0, 0.0
    for ci, ei in zip(c, e):
        acc_c += ci
        acc_e += ei
        if acc_e >= 5:
            pc.append(acc_c)
            pe.append(acc_e)
            acc_c = acc_e = 0.0
    if acc_e > 0:
        if pe:
            pc[-1] += acc_c
            pe[-1] += acc_e
        else:
            pc.append(acc_c)
            pe.append(acc_e)
    if len(pc) < 2:
        return 1.0
    return float(_st.chisquare(pc, pe).pvalue)


def _energy_stat(D: np.ndarray, nx: int) -> float:
    a = D[:nx, nx:].mean()
    b = D[:nx, :nx].mean()
    c = D[nx:, nx:].mean()
    return 2 * a - b - c


def energy_distance_test(x, y, rng: np.random.Generator, n_perm: int = 200) -> float:
    """Permutation p-value of the two-sample energy statistic."""
    x = np.asarray(x, float).reshape(len(x), -1)
    y = np.asarray(y, float).reshape(len(y), -1)
    z = np.vstack([x, y])
    D = np.sqrt(np.sum((z[:, None, :] - z[None, :, :]) ** 2, axis=2))
    nx = len(x)
    obs = _energy_stat(D, nx)
    hits = 0
    for _ in range(n_perm):
        p = rng.permutation(len(z))
        if _energy_stat(D[np.ix_(p, p)], nx) >= obs:
            hits += 1
    return (hits + 1) / (n_perm + 1)


def mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, float)
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
