"""Normalized sums of embedded samples and the coupled Gaussian.

The coupled sampler runs n trajectories per pair in lockstep.  At each step
Gt = sqrt(mean_i G_i^2) and the bundle increment dBt = Gt^+ n^{-1/2} sum_i da_i
(plus independent noise on the orthogonal complement of range(Gt)) drive both
s_n = int Gt dBt and g = int sqrt(E[G^2]) dBt.  Using the realized barycenter
increments da_i makes s_n equal n^{-1/2} sum_i a_tau^(i) to rounding error.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace

import numpy as np

from . import engine as E
from .measures import DiscreteMeasure, moments, sample
from .psd import eigh, psd_sqrt, spectral_apply, sym
from .stats import wilson_interval


@dataclass(frozen=True)
class CoupledPair:
    s_n: np.ndarray
    g: np.ndarray
    n: int

    def __post_init__(self):
        if not (np.all(np.isfinite(self.s_n)) and np.all(np.isfinite(self.g))):
            raise ValueError("non-finite coupled pair")


def sample_sn_iid(m: DiscreteMeasure, n: int, rng: np.random.Generator) -> np.ndarray:
    return sample_sn_iid_many(m, n, 1, rng)[0]


def sample_sn_iid_many(m: DiscreteMeasure, n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """k independent copies of n^{-1/2} sum of n iid draws, shape (k, d)."""
    if n < 1:
        raise ValueError("n must be positive")
    out = np.empty((k, m.dim))
    step = max(1, 2_000_000 // n)
    for s in range(0, k, step):
        e = min(k, s + step)
        out[s:e] = sample(m, rng, (e - s) * n).reshape(e - s, n, m.dim).sum(axis=1) / math.sqrt(n)
    return out


# --------------------------------------------------------------------------
# coupled sampler


def _check_grid(mg: E.MomentGrid, policy: E.Policy, cfg: E.EngineConfig, m: DiscreteMeasure) -> np.ndarray:
    if mg.policy.kind != policy.kind:
        raise ValueError("moment grid was produced with a different policy")
    idx = mg.step_indices
    if idx[0] != 0 or np.any(np.diff(idx) != 1):
        raise ValueError("moment grid must record every engine step")
    t_ref, _ = cfg.grid(policy, m, len(idx))
    if not np.allclose(t_ref, mg.times, rtol=0, atol=1e-12):
        raise ValueError("moment grid does not match the engine time grid")
    return psd_sqrt(mg.mean_gamma2)


def sample_coupled_pairs(m: DiscreteMeasure, policy: E.Policy | str, n: int, n_pairs: int,
                         mg: E.MomentGrid, cfg: E.EngineConfig, *, first_pair: int = 0,
                         check_sum: bool = True) -> list[CoupledPair]:
    """``n_pairs`` coupled (s_n, g) pairs; pair p uses the stream (cfg.seed, first_pair + p)."""
    policy = E.Policy.parse(policy)
    sq = _check_grid(mg, policy, cfg, m)
    G2 = mg.mean_gamma2
    L = len(mg.times)
    max_rows = max(n, cfg.chunk * 4)
    per = max(1, max_rows // n)
    out: list[CoupledPair] = []
    for p0 in range(0, n_pairs, per):
        p1 = min(n_pairs, p0 + per)
        out.extend(_bundle(m, policy, n, list(range(first_pair + p0, first_pair + p1)), sq, G2, L, cfg,
                           check_sum))
    return out


def sample_sn_coupled(m: DiscreteMeasure, policy: E.Policy | str, n: int, mg: E.MomentGrid,
                      cfg: E.EngineConfig, rng: np.random.Generator) -> CoupledPair:
    cfg = replace(cfg, seed=int(rng.integers(2**63)))
    return sample_coupled_pairs(m, policy, n, 1, mg, cfg)[0]


def _bundle(m, policy, n, pair_ids, sq, G2, L, cfg, check_sum) -> list[CoupledPair]:
    X = m.atoms
    d = m.dim
    P = len(pair_ids)
    B = P * n
    kind = policy.kind
    gens = [E.stream(cfg.seed, p) for p in pair_ids]
    n_total = cfg.n_steps(policy, m)
    times, oms = cfg.grid(policy, m, n_total + 1)
    rootn = math.sqrt(n)
    with np.errstate(divide="ignore"):
        logw0 = np.log(m.weights)
    logw = np.tile(logw0, (B, 1))
    mean0 = m.weights @ X
    a_prev = np.tile(mean0, (B, 1))
    s = np.tile(rootn * mean0, (P, 1))
    g = np.zeros((P, d))
    alive = np.ones(B, dtype=bool)
    T_hit = np.full(B, np.nan)
    pair_of = np.repeat(np.arange(P), n)
    pair_alive = np.ones(P, dtype=bool)
    Gsq_prev = None
    pair_alive_prev = pair_alive.copy()
    block = cfg.block
    buf = np.empty((P, block, n + 1, d))
    a_tau = np.zeros((B, d))
    theta = np.zeros((B, d))
    sqn = np.sum(X * X, axis=1)
    tilt = kind == E.FOELLMER
    side = {}

    def bridge(idx):
        def draw(rows):
            out = np.empty((len(rows), d))
            for r, i in enumerate(idx[rows]):
                sd = side.get(i)
                if sd is None:
                    sd = side[i] = E.SideNormals(E.bridge_stream(gens[i // n], int(i % n)), d)
                out[r] = sd.next()
            return out
        return draw

    k = 0
    while True:
        t, om = float(times[k]), float(oms[k])
        idx = np.flatnonzero(alive)
        a_now = a_prev.copy()
        Gam = np.zeros((B, d, d))
        C = loc = None
        if idx.size:
            if tilt:
                logw[idx] = logw0[None, :] + theta[idx] @ X.T - 0.5 * (t / om) * sqn[None, :]
            loc = E._local(logw[idx], X, cfg.rank_rtol)
            done = (loc.w.max(axis=1) >= cfg.weight_collapse) | \
                (np.trace(loc.A, axis1=1, axis2=2) <= cfg.trace_collapse)
            a_now[idx] = loc.a
            if done.any():
                di = idx[done]
                j = np.argmax(loc.w[done], axis=1)
                a_now[di] = X[j]
                a_tau[di] = X[j]
                alive[di] = False
                keep = ~done
                idx = idx[keep]
                loc = E._Local(*(getattr(loc, f)[keep] for f in ("w", "a", "Xc", "A", "lam", "Q", "retained")))
        # close the previous step with the realized increments
        if Gsq_prev is not None:
            da = (a_now - a_prev).reshape(P, n, d).sum(axis=1) / rootn
            dt = float(times[k] - times[k - 1])
            lam, Q = Gsq_prev
            root = np.sqrt(np.clip(lam, 0, None))
            keepv = root > 1e-12 * np.maximum(root[:, -1:], 1e-300)
            pinv = spectral_apply(lam, Q, np.where(keepv, 1.0 / np.where(keepv, root, 1.0), 0.0))
            comp = spectral_apply(lam, Q, (~keepv).astype(float))
            Z = buf[:, (k - 1) % block, n]
            dBt = np.einsum("pij,pj->pi", pinv, da) + math.sqrt(dt) * np.einsum("pij,pj->pi", comp, Z)
            act = pair_alive_prev
            s[act] += np.einsum("pij,pj->pi", spectral_apply(lam, Q, root), dBt)[act]
            gk = sq[k - 1] if k - 1 < L else np.zeros((d, d))
            g[act] += dBt[act] @ gk.T
        a_prev = a_now
        # pairs whose trajectories all collapsed: add the remaining Gaussian mass in one draw
        pa = np.bincount(pair_of[alive], minlength=P) > 0
        newly = pair_alive & ~pa
        if newly.any():
            for p in np.flatnonzero(newly):
                g[p] += _tail_draw(G2, times, k, L, gens[p], d)
        pair_alive = pa
        if idx.size == 0 or k >= n_total:
            break
        if k % block == 0:
            for p in np.flatnonzero(pair_alive):
                buf[p] = gens[p].standard_normal((block, n + 1, d))
        capped = None
        if kind == E.CAPPED:
            opn = loc.lam[:, -1]
            nh = np.isnan(T_hit[idx]) & (opn >= policy.cap_threshold) & (t <= policy.cap_time)
            T_hit[idx[nh]] = t
            capped = (t <= policy.cap_time) & (np.isnan(T_hit[idx]) | (t <= T_hit[idx]))
        c = E._drive_values(kind, loc, om, capped)
        C = spectral_apply(loc.lam, loc.Q, c)
        Gam[idx] = E._gamma(kind, loc, C, c)
        G2b = (Gam @ Gam).reshape(P, n, d, d).mean(axis=1)
        Gsq_prev = eigh(sym(G2b))
        pair_alive_prev = pair_alive.copy()

        dt = float(times[k + 1] - times[k])
        Zi = buf[pair_of[idx], k % block, idx % n]
        dB = math.sqrt(dt) * Zi
        if tilt:
            theta[idx] += loc.a * (dt / (om * om)) + dB / om
        else:
            new = E._advance(logw[idx], X, loc, C, dB, dt, kind, capped, cfg, bridge(idx))
            if cfg.renormalization == "hull":
                low = loc.retained.sum(axis=1) < d
                if low.any():
                    sub = E._Local(*(getattr(loc, f)[low] for f in ("w", "a", "Xc", "A", "lam", "Q", "retained")))
                    new[low] = E._hull_prune(new[low], sub, cfg.hull_tol, m)
            logw[idx] = new - np.max(new, axis=1, keepdims=True)
        k += 1

    if alive.any():
        raise E.NoCollapseError("coupled bundle did not collapse within max_steps")
    if check_sum:
        direct = a_tau.reshape(P, n, d).sum(axis=1) / rootn
        err = np.max(np.abs(direct - s))
        if err > 1e-6 * max(1.0, float(np.max(np.abs(direct)))) * math.sqrt(k + 1):
            raise E.EngineError(f"coupled sum drifted from the embedded sum by {err:.3e}")
        s = direct
    return [CoupledPair(s[p].copy(), g[p].copy(), n) for p in range(P)]


def _tail_draw(G2: np.ndarray, times: np.ndarray, k: int, L: int, gen, d: int) -> np.ndarray:
    """N(0, sum_{j >= k} E[G_j^2] dt_j) using the moment grid beyond step k."""
    if k >= L - 1:
        return np.zeros(d)
    dts = np.diff(times[: L])[k:]
    cov = np.tensordot(dts, G2[k: L - 1], axes=(0, 0))
    return psd_sqrt(cov) @ gen.standard_normal(d)


# --------------------------------------------------------------------------
# right-hand side of the coupling inequality


@dataclass(frozen=True)
class BoundReportMain:
    rhs_integral: float
    times: np.ndarray
    branch_n: np.ndarray
    branch_4: np.ndarray
    integrand: np.ndarray
    crossover_time: float | None
    n: int
    quadrature_error: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t", "branch_over_n", "branch_4tr", "integrand"])
        for row in zip(self.times, self.branch_n, self.branch_4, self.integrand):
            wr.writerow([f"{x:.17g}" for x in row])
        return buf.getvalue()


def _trapz(y, x):
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x))) if len(x) > 1 else 0.0


def main_rhs_from_arrays(times, EG2, EG4, n: int) -> BoundReportMain:
    """Trapezoid integral of min(Tr(E[G^4] E[G^2]^+)/n, 4 Tr E[G^2])."""
    times = np.asarray(times, float)
    EG2 = np.asarray(EG2, float)
    EG4 = np.asarray(EG4, float)
    if EG2.ndim == 1:
        EG2 = EG2[:, None, None]
        EG4 = EG4[:, None, None]
    lam, Q = eigh(sym(EG2))
    keep = lam > 1e-10 * np.maximum(lam[:, -1:], 1e-300)
    pinv = spectral_apply(lam, Q, np.where(keep, 1.0 / np.where(keep, lam, 1.0), 0.0))
    b1 = np.einsum("gij,gji->g", EG4, pinv) / n
    b4 = 4.0 * np.trace(EG2, axis1=1, axis2=2)
    f = np.clip(np.minimum(b1, b4), 0.0, None)
    total = _trapz(f, times)
    coarse = _trapz(f[::2], times[::2]) if len(times) > 4 else total
    switch = np.flatnonzero(b4 < b1)
    cross = float(times[switch[0]]) if switch.size and switch[0] > 0 else None
    return BoundReportMain(total, times, b1, b4, f, cross, n, abs(total - coarse) / 3.0)


def theorem_main_rhs(mg: E.MomentGrid, n: int) -> BoundReportMain:
    return main_rhs_from_arrays(mg.times, mg.mean_gamma2, mg.mean_gamma4, n)


def coupling_cost(pairs: list[CoupledPair]) -> tuple[float, float]:
    """Mean of |s_n - g|^2 and its standard error."""
    c = np.array([np.sum((p.s_n - p.g) ** 2) for p in pairs])
    return float(c.mean()), float(c.std(ddof=1) / math.sqrt(len(c)))


# --------------------------------------------------------------------------
# collapse times


@dataclass(frozen=True)
class TauStats:
    beta: float
    mean_tau: float
    se_tau: float
    thresholds: np.ndarray
    freq: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    n: int

    @property
    def bound(self) -> np.ndarray:
        return 0.5 ** np.arange(len(self.thresholds))

    def tails_dominated(self) -> np.ndarray:
        """freq <= 2^-i + (upper CI - freq) per row."""
        return self.freq <= self.bound + (self.ci_hi - self.freq) + 1e-12

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["i", "threshold", "freq", "ci_lo", "ci_hi", "bound"])
        for i, row in enumerate(zip(self.thresholds, self.freq, self.ci_lo, self.ci_hi, self.bound)):
            wr.writerow([i] + [f"{x:.17g}" for x in row])
        return buf.getvalue()


def tau_statistics(taus, beta: float, i_max: int = 5, level: float = 0.99,
                   collapsed=None) -> TauStats:
    """Mean collapse time and the dyadic tail table P(tau >= i * 2 beta^2).

    ``taus`` may be a sequence of TrajectoryRecord or an array of times.
    """
    if len(taus) and isinstance(taus[0], E.TrajectoryRecord):
        collapsed = np.array([r.collapsed for r in taus])
        taus = np.array([r.tau for r in taus])
    taus = np.asarray(taus, float)
    if collapsed is not None and not np.all(collapsed):
        raise ValueError("uncollapsed records present")
    if len(taus) < 1000:
        raise ValueError("need at least 1000 records")
    thr = 2.0 * beta * beta * np.arange(i_max + 1)
    cnt = np.array([(taus >= th).sum() for th in thr])
    lo, hi = wilson_interval(cnt, len(taus), level)
    return TauStats(beta, float(taus.mean()), float(taus.std(ddof=1) / math.sqrt(len(taus))),
                    thr, cnt / len(taus), lo, hi, len(taus))


def support_radius(m: DiscreteMeasure) -> float:
    """beta = max |x| over the support."""
    return moments(m).radius


# --------------------------------------------------------------------------
# bounds and exact laws


def theorem_bounded_w2_bound(beta: float, d: int, n: int) -> float:
    """beta sqrt(d) sqrt(32 + 2 log2 n) / sqrt(n)."""
    return beta * math.sqrt(d) * math.sqrt(32.0 + 2.0 * math.log2(n)) / math.sqrt(n)


def lattice_sum_law(m: DiscreteMeasure, n: int, step: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact law of n^{-1/2} sum of n iid draws of a 1-d lattice measure (spacing ``step``)."""
    if m.dim != 1:
        raise ValueError("exact lattice law is one-dimensional")
    x = m.atoms[:, 0]
    k = np.rint((x - x.min()) / step).astype(int)
    if np.any(np.abs(x - x.min() - k * step) > 1e-9 * step):
        raise ValueError("atoms are not on the lattice")
    p = np.zeros(k.max() + 1)
    np.add.at(p, k, m.weights)
    q = np.array([1.0])
    base = p.copy()
    e = n
    while e:
        if e & 1:
            q = np.convolve(q, base)
        e >>= 1
        if e:
            base = np.convolve(base, base)
        q = np.clip(q, 0, None)
        q /= q.sum()
    support = (n * x.min() + step * np.arange(len(q))) / math.sqrt(n)
    keep = q > 1e-300
    return support[keep], q[keep]
