"""Stochastic localization of a finitely supported measure.

The measure-valued process mu_t is represented by log-weights over the atoms
of the initial measure.  Each step applies the exponential tilt

    w_i <- w_i * exp(<C (x_i - a), dB> - |C (x_i - a)|^2 dt / 2)

and renormalizes.  Three driving policies are supported: projection
(C = A^+), capped (C = min(A^+, I) up to the stopping time T, then A^+) and
Foellmer (C = I / (1 - t)).  For Foellmer a second integrator keeps the
Gaussian tilt in closed form and only integrates the linear coefficient.

Ensembles of trajectories advance in lockstep on one time grid; each
trajectory owns an RNG stream derived from (seed, index), so results do not
depend on chunking or thread count.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .measures import DiscreteMeasure, moments
from .psd import eigh, spectral_apply, sym

CAP_OP_THRESHOLD = 3.0
CAP_TIME = 1.0

PROJECTION = "projection"
CAPPED = "capped"
FOELLMER = "foellmer"
_KINDS = (PROJECTION, CAPPED, FOELLMER)


class EngineError(RuntimeError):
    pass


class NoCollapseError(EngineError):
    pass


@dataclass(frozen=True)
class Policy:
    kind: str
    cap_threshold: float = CAP_OP_THRESHOLD
    cap_time: float = CAP_TIME

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown policy {self.kind!r}")

    @classmethod
    def parse(cls, name: "str | Policy") -> "Policy":
        return name if isinstance(name, Policy) else cls(str(name).lower())

    def __str__(self) -> str:
        return self.kind


@dataclass(frozen=True)
class EngineConfig:
    """Discretization and collapse settings.

    Projection/capped runs use a uniform step ``dt`` (default
    ``dt_rel * radius**2``).  Foellmer runs use a uniform step ``du`` in
    u = -log(1 - t) up to ``u_max``.
    """

    dt: float | None = None
    dt_rel: float = 1e-3
    du: float = 1e-3
    u_max: float = 30.0
    horizon: float | None = None
    weight_collapse: float = 1.0 - 1e-6
    trace_collapse: float = 1e-10
    rank_rtol: float = 1e-10
    hull_tol: float = 1e-7
    max_steps: int = 1_000_000
    seed: int = 0
    renormalization: str = "hull"
    noise: str = "gaussian"
    block: int = 256
    threads: int = 1
    chunk: int = 4096
    prune_log: float = 50.0
    prune_every: int = 16
    stiff_tol: float = 0.3
    stiff_floor: float = 1e-4
    max_substeps: int = 2000

    def __post_init__(self):
        if not (0.0 < self.weight_collapse < 1.0):
            raise ValueError("weight_collapse must lie in (0, 1)")
        for name in ("dt_rel", "du", "u_max", "trace_collapse", "rank_rtol", "hull_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.dt is not None and self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.stiff_tol <= 0 or not (0 <= self.stiff_floor < 1) or self.max_substeps < 1:
            raise ValueError("need stiff_tol > 0, 0 <= stiff_floor < 1 and max_substeps >= 1")
        if self.max_steps < 1000:
            raise ValueError("max_steps must be at least 1000")
        if self.renormalization not in ("hull", "none"):
            raise ValueError("renormalization must be 'hull' or 'none'")
        if self.noise not in ("gaussian", "planted"):
            raise ValueError("noise must be 'gaussian' or 'planted'")

    def step_size(self, m: DiscreteMeasure) -> float:
        if self.dt is not None:
            return self.dt
        r = moments(m).radius
        return self.dt_rel * (r * r if r > 0 else 1.0)

    def n_steps(self, policy: Policy, m: DiscreteMeasure) -> int:
        if policy.kind == FOELLMER:
            n = int(math.floor(self.u_max / self.du + 1e-9))
            if self.horizon is not None:
                n = min(n, int(math.floor(-math.log1p(-min(self.horizon, 1 - 1e-16)) / self.du + 1e-9)))
            return min(n, self.max_steps)
        if self.horizon is not None:
            return min(int(round(self.horizon / self.step_size(m))), self.max_steps)
        return self.max_steps

    def grid(self, policy: Policy, m: DiscreteMeasure, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Times t_0..t_{n-1} and 1 - t_k (kept separately to avoid cancellation)."""
        k = np.arange(n, dtype=float)
        if policy.kind == FOELLMER:
            s = np.exp(-k * self.du)
            return -np.expm1(-k * self.du), s
        t = k * self.step_size(m)
        return t, 1.0 - t


def stream(seed: int, index: int) -> np.random.Generator:
    """The RNG stream owned by trajectory (or bundle) ``index``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index),)))


# --------------------------------------------------------------------------
# batched kernel


@dataclass
class _Local:
    w: np.ndarray
    a: np.ndarray
    Xc: np.ndarray
    A: np.ndarray
    lam: np.ndarray
    Q: np.ndarray
    retained: np.ndarray


def _local(logw: np.ndarray, X: np.ndarray, rank_rtol: float) -> _Local:
    lw = logw - np.max(logw, axis=1, keepdims=True)
    w = np.exp(lw)
    w /= np.sum(w, axis=1, keepdims=True)
    if X.ndim == 2:
        a = w @ X
        Xc = X[None, :, :] - a[:, None, :]
    else:
        a = np.einsum("bk,bkd->bd", w, X)
        Xc = X - a[:, None, :]
    A = sym(np.matmul(np.swapaxes(Xc * w[:, :, None], 1, 2), Xc))
    lam, Q = eigh(A)
    lam = np.clip(lam, 0.0, None)
    retained = lam > rank_rtol * lam[:, -1:]
    return _Local(w, a, Xc, A, lam, Q, retained)


def _drive_values(kind: str, loc: _Local, one_minus_t: float, capped: np.ndarray | None) -> np.ndarray:
    if kind == FOELLMER:
        return np.full_like(loc.lam, 1.0 / one_minus_t)
    inv = np.where(loc.retained, 1.0 / np.where(loc.retained, loc.lam, 1.0), 0.0)
    if kind == CAPPED:
        inv = np.where(capped[:, None], np.minimum(inv, 1.0), inv)
    return inv


def _gamma(kind: str, loc: _Local, C: np.ndarray, c: np.ndarray) -> np.ndarray:
    # A and C share eigenvectors; the spectral product keeps A A^+ an exact projection
    if kind == FOELLMER:
        return sym(np.matmul(loc.A, C))
    return spectral_apply(loc.lam, loc.Q, np.where(loc.retained, loc.lam, 0.0) * c)


def _tilt_increment(loc: _Local, C: np.ndarray, dB: np.ndarray, dt: float) -> np.ndarray:
    CdB = np.einsum("bij,bj->bi", C, dB)
    lin = np.einsum("bnd,bd->bn", loc.Xc, CdB)
    XC = np.matmul(loc.Xc, C)
    dt = np.asarray(dt, dtype=float)
    return lin - 0.5 * (dt[:, None] if dt.ndim else dt) * np.sum(XC * XC, axis=2)


def bridge_stream(gen: np.random.Generator, *key: int) -> np.random.Generator:
    """Side stream for substep noise; leaves the main stream of ``gen`` untouched."""
    ss = gen.bit_generator.seed_seq
    return np.random.default_rng(np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + (2**31 - 1,) + key))


def _atom_stiffness(loc: _Local, C: np.ndarray, h, floor: float) -> np.ndarray:
    """max over atoms of weight >= floor of |C (x - a)|^2 h, per row."""
    YC = np.matmul(loc.Xc, C)
    st = np.sum(YC * YC, axis=2)
    return np.max(np.where(loc.w >= floor, st, 0.0), axis=1) * h


def _advance(logw: np.ndarray, X: np.ndarray, loc: _Local, C: np.ndarray, dB: np.ndarray,
             dt: float, kind: str, capped, cfg: EngineConfig, side) -> np.ndarray:
    """Log-weight update over one step.

    A row whose step is stiff (some atom of weight >= ``stiff_floor`` has
    |C(x - a)|^2 dt > ``stiff_tol``) is integrated with adaptive substeps
    h = stiff_tol / max |C(x - a)|^2, driven by a Brownian bridge pinned to
    the same dB and with C re-evaluated each substep.  Near a rank drop or
    an atom dying the stiffness grows like 1/distance^2, so a fixed
    refinement factor is not enough.  ``side(rows)`` returns standard
    normals of shape (len(rows), d).
    """
    new = logw + _tilt_increment(loc, C, dB, dt)
    if kind == FOELLMER:
        return new
    hot = np.flatnonzero(_atom_stiffness(loc, C, dt, cfg.stiff_floor) > cfg.stiff_tol)
    if hot.size == 0:
        return new
    lw = logw[hot].copy()
    Xr = X if X.ndim == 2 else X[hot]
    cap = None if capped is None else capped[hot]
    rem_t = np.full(hot.size, dt)
    rem_b = dB[hot].copy()
    live = np.ones(hot.size, dtype=bool)
    for it in range(cfg.max_substeps):
        li = np.flatnonzero(live)
        if li.size == 0:
            break
        sub = _local(lw[li], Xr if Xr.ndim == 2 else Xr[li], cfg.rank_rtol)
        done = (sub.w.max(axis=1) >= cfg.weight_collapse) | \
            (np.trace(sub.A, axis1=1, axis2=2) <= cfg.trace_collapse)
        if done.any():
            # collapsed mid-step: freeze, the outer loop snaps it at the next grid point
            live[li[done]] = False
            keep = ~done
            li = li[keep]
            sub = _Local(*(getattr(sub, f)[keep] for f in ("w", "a", "Xc", "A", "lam", "Q", "retained")))
            if li.size == 0:
                break
        Cs = spectral_apply(sub.lam, sub.Q, _drive_values(kind, sub, 1.0, None if cap is None else cap[li]))
        st = _atom_stiffness(sub, Cs, 1.0, cfg.stiff_floor)
        T = rem_t[li]
        h = np.minimum(T, cfg.stiff_tol / np.maximum(st, 1e-300))
        if it == cfg.max_substeps - 1:
            h = T
        frac = h / T
        Z = side(hot[li])
        xi = frac[:, None] * rem_b[li] + np.sqrt(np.clip(h * (1 - frac), 0, None))[:, None] * Z
        step_lw = lw[li] + _tilt_increment(sub, Cs, xi, h)
        lw[li] = step_lw - np.max(step_lw, axis=1, keepdims=True)
        rem_t[li] = T - h
        rem_b[li] -= xi
        live[li[rem_t[li] <= 1e-15 * dt]] = False
    new[hot] = lw
    return new


# --------------------------------------------------------------------------
# single-trajectory state API


@dataclass(frozen=True, eq=False)
class TrajectoryState:
    measure: DiscreteMeasure
    t: float
    logw: np.ndarray
    weights: np.ndarray
    a: np.ndarray
    A: np.ndarray
    C: np.ndarray
    Gamma: np.ndarray
    rank: int
    T_hit: float | None
    collapsed: bool


def _state_from(m: DiscreteMeasure, policy: Policy, cfg: EngineConfig, t: float, s: float,
                logw: np.ndarray, T_hit: float | None, prev_rank: int | None) -> TrajectoryState:
    loc = _local(logw[None, :], m.atoms, cfg.rank_rtol)
    d = m.dim
    w = loc.w[0]
    collapsed = bool(w.max() >= cfg.weight_collapse or np.trace(loc.A[0]) <= cfg.trace_collapse)
    if collapsed:
        j = int(np.argmax(w))
        onehot = np.full_like(logw, -np.inf)
        onehot[j] = 0.0
        z = np.zeros((d, d))
        return TrajectoryState(m, t, onehot, (onehot == 0).astype(float), m.atoms[j].copy(),
                               z, z, z, 0, T_hit, True)
    if policy.kind == CAPPED and T_hit is None and t <= policy.cap_time \
            and loc.lam[0, -1] >= policy.cap_threshold:
        T_hit = t
    capped = np.array([t <= policy.cap_time and (T_hit is None or t <= T_hit)])
    c = _drive_values(policy.kind, loc, s, capped)
    C = spectral_apply(loc.lam, loc.Q, c)[0]
    Gamma = _gamma(policy.kind, loc, C[None], c)[0]
    rank = int(loc.retained[0].sum())
    if cfg.renormalization == "hull" and rank < d:
        logw = _hull_prune(logw[None, :], loc, cfg.hull_tol, m)[0]
    return TrajectoryState(m, t, logw, w, loc.a[0], loc.A[0], C, Gamma, rank, T_hit, False)


def _hull_prune(logw: np.ndarray, loc: _Local, tol: float, m: DiscreteMeasure) -> np.ndarray:
    """Drop atoms off the affine hull a + range(A) once a direction has collapsed."""
    scale = tol * (1.0 + float(np.max(np.abs(m.atoms))))
    null = np.where(loc.retained[:, None, :], 0.0, loc.Q)
    off = np.einsum("bnd,bde->bne", loc.Xc, null)
    dist = np.sqrt(np.sum(off * off, axis=2))
    drop = dist > scale
    # the atom nearest the hull always survives
    drop[np.arange(len(dist)), np.argmin(dist, axis=1)] = False
    return np.where(drop, -np.inf, logw)


def initial_state(m: DiscreteMeasure, policy: Policy | str, cfg: EngineConfig | None = None) -> TrajectoryState:
    policy = Policy.parse(policy)
    cfg = cfg or EngineConfig()
    with np.errstate(divide="ignore"):
        logw = np.log(m.weights)
    return _state_from(m, policy, cfg, 0.0, 1.0, logw, None, None)


def step(state: TrajectoryState, policy: Policy | str, dB, dt: float,
         cfg: EngineConfig | None = None) -> TrajectoryState:
    """Advance one state by one exponential-tilt step with Brownian increment ``dB``."""
    policy = Policy.parse(policy)
    cfg = cfg or EngineConfig()
    if dt <= 0:
        raise ValueError("dt must be positive")
    if state.collapsed:
        return replace(state, t=state.t + dt)
    m = state.measure
    dB = np.asarray(dB, dtype=float).reshape(1, m.dim)
    loc = _local(state.logw[None, :], m.atoms, cfg.rank_rtol)
    inc = _tilt_increment(loc, state.C[None], dB, dt)[0]
    logw = state.logw + inc
    if not np.all(np.isfinite(logw[np.isfinite(state.logw)])) or np.isnan(logw).any():
        raise EngineError("non-finite log-weights; dt is too large")
    t = state.t + dt
    return _state_from(m, policy, cfg, t, 1.0 - t, logw, state.T_hit, state.rank)


# --------------------------------------------------------------------------
# ensemble driver


class SideNormals:
    """Buffered standard normals from a side stream, one d-vector at a time."""

    def __init__(self, gen: np.random.Generator, d: int, block: int = 64):
        self.gen, self.d, self.block = gen, d, block
        self.buf = np.empty((0, d))
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos == len(self.buf):
            self.buf = self.gen.standard_normal((self.block, self.d))
            self.pos = 0
        self.pos += 1
        return self.buf[self.pos - 1]


class _Noise:
    """Per-trajectory normal draws in blocks so each stream is order independent."""

    def __init__(self, gens: list[np.random.Generator], d: int, block: int):
        self.gens = gens
        self.d = d
        self.block = block
        self.buf = np.empty((len(gens), block, d))
        self.side = {}

    def bridge_rows(self, idx: np.ndarray):
        return lambda rows: self.side_draw(idx[rows])

    def side_draw(self, traj: np.ndarray) -> np.ndarray:
        out = np.empty((len(traj), self.d))
        for r, i in enumerate(traj):
            sd = self.side.get(i)
            if sd is None:
                sd = self.side[i] = SideNormals(bridge_stream(self.gens[i]), self.d)
            out[r] = sd.next()
        return out

    def draw(self, k: int, idx: np.ndarray) -> np.ndarray:
        j = k % self.block
        if j == 0:
            for i in idx:
                self.buf[i] = self.gens[i].standard_normal((self.block, self.d))
        return self.buf[idx, j]


@dataclass
class _Sums:
    """Per-grid-point partial sums; merging is elementwise addition."""

    d: int
    n_traj: int
    keep_traces: bool
    rows: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)

    def add(self, g: int, idx: np.ndarray, Gamma: np.ndarray, A: np.ndarray, extra: dict) -> None:
        G2 = Gamma @ Gamma
        G4 = G2 @ G2
        tr1 = np.trace(Gamma, axis1=1, axis2=2)
        tr2 = np.trace(G2, axis1=1, axis2=2)
        tr4 = np.trace(G4, axis1=1, axis2=2)
        row = {
            "g1": Gamma.sum(0), "g2": G2.sum(0), "g4": G4.sum(0), "A": A.sum(0),
            "g1sq": (Gamma**2).sum(0), "g2sq": (G2**2).sum(0), "g4sq": (G4**2).sum(0),
            "tr1": tr1.sum(), "tr1sq": (tr1**2).sum(), "tr2": tr2.sum(), "tr2sq": (tr2**2).sum(),
            "tr4": tr4.sum(), "tr4sq": (tr4**2).sum(),
        }
        for key, val in extra.items():
            row[key] = val.sum()
            row[key + "sq"] = (val**2).sum()
        self.rows[g] = row
        if self.keep_traces:
            vals = {"tr_gamma": tr1, "tr_gamma2": tr2, "tr_A": np.trace(A, axis1=1, axis2=2), **extra}
            for key, val in vals.items():
                arr = self.traces.setdefault(key, {})
                col = np.zeros(self.n_traj)
                col[idx] = val
                arr[g] = col

    def add_constant(self, g: int, key: str, values: np.ndarray, idx: np.ndarray) -> None:
        """Accumulate a quantity for trajectories that are no longer stepped."""
        row = self.rows.setdefault(g, {})
        row[key] = row.get(key, 0.0) + values.sum()
        row[key + "sq"] = row.get(key + "sq", 0.0) + (values**2).sum()
        if self.keep_traces:
            arr = self.traces.setdefault(key, {})
            col = arr.setdefault(g, np.zeros(self.n_traj))
            col[idx] += values


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    policy: Policy
    tau: float
    embedded_point: np.ndarray
    collapsed: bool
    T_hit: float | None = None
    grid: np.ndarray | None = None
    gammas: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)
    path: dict | None = None


@dataclass
class EnsembleResult:
    policy: Policy
    times: np.ndarray
    one_minus_t: np.ndarray
    tau: np.ndarray
    embedded: np.ndarray
    embedded_index: np.ndarray
    collapsed: np.ndarray
    T_hit: np.ndarray
    diagnostics: dict
    sums: list
    n_traj: int
    d: int
    paths: list | None = None

    def records(self) -> list[TrajectoryRecord]:
        out = []
        for i in range(self.n_traj):
            T = None if np.isnan(self.T_hit[i]) else float(self.T_hit[i])
            out.append(TrajectoryRecord(self.policy, float(self.tau[i]), self.embedded[i].copy(),
                                        bool(self.collapsed[i]), T,
                                        diagnostics=self.diagnostics,
                                        path=None if self.paths is None else self.paths[i]))
        return out


def _merge_diag(ds: list[dict]) -> dict:
    out: dict = {}
    for dd in ds:
        for key, val in dd.items():
            if key.startswith("max_"):
                out[key] = max(out.get(key, -np.inf), val)
            else:
                out[key] = out.get(key, 0) + val
    return out


def _run_chunk(m: DiscreteMeasure, policy: Policy, cfg: EngineConfig, gens: list, *, tilt: bool,
               record: np.ndarray | None, keep_traces: bool, store_path: bool,
               n_steps: int | None) -> EnsembleResult:
    X = m.atoms
    N, d = X.shape
    B = len(gens)
    kind = policy.kind
    if tilt and kind != FOELLMER:
        raise ValueError("the closed-form tilt integrator only applies to the Foellmer policy")
    n_total = n_steps if n_steps is not None else cfg.n_steps(policy, m)
    times, oms = cfg.grid(policy, m, n_total + 1)
    with np.errstate(divide="ignore"):
        logw0 = np.log(m.weights)
    logw = np.tile(logw0, (B, 1))
    sqn = np.sum(X * X, axis=1)
    # per-trajectory active atoms; atoms far below the top weight are dropped for good
    act = np.tile(np.arange(N), (B, 1))

    planted = None
    if cfg.noise == "planted":
        cw = np.cumsum(m.weights)
        planted = np.array([min(int(np.searchsorted(cw, g.random(), side="right")), N - 1) for g in gens])
    noise = _Noise(gens, d, cfg.block)

    alive = np.ones(B, dtype=bool)
    tau = np.full(B, np.nan)
    emb = np.zeros((B, d))
    emb_idx = np.full(B, -1)
    T_hit = np.full(B, np.nan)
    prev_rank = np.full(B, d + 1)
    theta = np.zeros((B, d))
    vdrift = np.zeros((B, d))
    diag = {"rank_violations": 0, "steps": 0, "max_idempotency_err": 0.0, "max_cap_norm": 0.0,
            "max_cap_overshoot": 0.0, "max_gamma_excess_1": -np.inf, "max_gamma_excess_inv_t": -np.inf,
            "max_simplex_err": 0.0, "hull_prunes": 0}
    sums = _Sums(d, B, keep_traces)
    paths = [dict(times=[], weights=[], C=[], dB=[], a=[], A=[], atoms=X) for _ in range(B)] if store_path else None
    if isinstance(record, str):
        rec_map = _AllSteps(n_total)
    else:
        rec_map = None if record is None else {int(r): gi for gi, r in enumerate(record)}

    k = 0
    while True:
        t = float(times[k])
        s = float(oms[k])
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        if k and k % cfg.prune_every == 0 and act.shape[1] > 8:
            act, logw = _compact(act, logw, idx, cfg.prune_log)
        ai = act[idx]
        full = act.shape[1] == N
        Xa = X if full else X[ai]
        if tilt:
            q = t / s
            if full:
                logw[idx] = logw0[None, :] + theta[idx] @ X.T - 0.5 * q * sqn[None, :]
            else:
                logw[idx] = logw0[ai] + np.einsum("bd,bkd->bk", theta[idx], Xa) - 0.5 * q * sqn[ai]
        loc = _local(logw[idx], Xa, cfg.rank_rtol)
        if not np.all(np.isfinite(loc.w)):
            raise EngineError("weights became non-finite (underflow or NaN)")
        diag["max_simplex_err"] = max(diag["max_simplex_err"], float(np.max(np.abs(loc.w.sum(1) - 1))))
        wmax = loc.w.max(axis=1)
        trA = np.trace(loc.A, axis1=1, axis2=2)
        done = (wmax >= cfg.weight_collapse) | (trA <= cfg.trace_collapse)
        if done.any():
            di = idx[done]
            j = ai[done, np.argmax(loc.w[done], axis=1)]
            tau[di] = t
            emb[di] = X[j]
            emb_idx[di] = j
            alive[di] = False
            if tilt:
                # freeze the drift at collapse; its later growth is added in _record_dead
                vdrift[di] = X[j] / s - theta[di]
        keep = ~done
        idx = idx[keep]
        if idx.size == 0:
            _record_dead(sums, rec_map, k, kind, B, alive, tau, oms, vdrift, d)
            break
        loc = _Local(loc.w[keep], loc.a[keep], loc.Xc[keep], loc.A[keep], loc.lam[keep], loc.Q[keep],
                     loc.retained[keep])
        ai = ai[keep]

        capped = None
        if kind == CAPPED:
            opn = loc.lam[:, -1]
            newly = np.isnan(T_hit[idx]) & (opn >= policy.cap_threshold) & (t <= policy.cap_time)
            if newly.any():
                T_hit[idx[newly]] = t
                diag["max_cap_overshoot"] = max(diag["max_cap_overshoot"],
                                                float(np.max(opn[newly] - policy.cap_threshold)))
            capped = (t <= policy.cap_time) & (np.isnan(T_hit[idx]) | (t <= T_hit[idx]))
        c = _drive_values(kind, loc, s, capped)
        C = spectral_apply(loc.lam, loc.Q, c)
        Gamma = _gamma(kind, loc, C, c)

        rank = loc.retained.sum(axis=1)
        diag["rank_violations"] += int(np.sum(rank > prev_rank[idx]))
        prev_rank[idx] = rank
        if kind == PROJECTION:
            err = Gamma @ Gamma - Gamma
            diag["max_idempotency_err"] = max(diag["max_idempotency_err"],
                                              float(np.max(np.sqrt(np.sum(err**2, axis=(1, 2))))))
        elif kind == CAPPED:
            diag["max_cap_norm"] = max(diag["max_cap_norm"], float(np.max(np.abs(np.linalg.eigvalsh(Gamma)))))
        else:
            gmax = np.max(np.linalg.eigvalsh(Gamma), axis=1) if d > 1 else Gamma[:, 0, 0]
            diag["max_gamma_excess_1"] = max(diag["max_gamma_excess_1"], float(np.max(gmax - 1.0)))
            if t > 0:
                diag["max_gamma_excess_inv_t"] = max(diag["max_gamma_excess_inv_t"],
                                                     float(np.max(gmax - 1.0 / t)))

        if rec_map is not None and k in rec_map:
            extra = {}
            if kind == FOELLMER:
                v = loc.a / s - theta[idx] if tilt else vdrift[idx]
                extra["v2"] = np.sum(v * v, axis=1)
            sums.add(rec_map[k], idx, Gamma, loc.A, extra)
            _record_dead(sums, rec_map, k, kind, B, alive, tau, oms, vdrift, d, gi=rec_map[k])

        if k >= n_total:
            break

        dt = float(times[k + 1] - times[k])
        Z = noise.draw(k, idx)
        dB = math.sqrt(dt) * Z
        if planted is not None:
            dB = dB + dt * np.einsum("bij,bj->bi", C, X[planted[idx]] - loc.a)
        if paths is not None:
            for r, i in enumerate(idx):
                p = paths[i]
                p["times"].append(t)
                full = np.zeros(N)
                full[ai[r]] = loc.w[r]
                p["weights"].append(full)
                p["C"].append(C[r].copy())
                p["dB"].append(dB[r].copy())
                p["a"].append(loc.a[r].copy())
                p["A"].append(loc.A[r].copy())
        if tilt:
            theta[idx] += loc.a * (dt / (s * s)) + dB / s
        else:
            if kind == FOELLMER:
                eye = np.eye(d)[None]
                vdrift[idx] += np.einsum("bij,bj->bi", (Gamma - eye) / s, dB)
            new = _advance(logw[idx], Xa, loc, C, dB, dt, kind, capped, cfg, noise.bridge_rows(idx))
            if np.isnan(new).any():
                raise EngineError("NaN in log-weights")
            if cfg.renormalization == "hull":
                low = rank < d
                if low.any():
                    sub = _Local(loc.w[low], loc.a[low], loc.Xc[low], loc.A[low], loc.lam[low], loc.Q[low],
                                 loc.retained[low])
                    pruned = _hull_prune(new[low], sub, cfg.hull_tol, m)
                    diag["hull_prunes"] += int(np.sum(np.isinf(pruned) & np.isfinite(new[low])))
                    new[low] = pruned
            logw[idx] = new - np.max(new, axis=1, keepdims=True)
        diag["steps"] += 1
        k += 1

    if rec_map is not None and not alive.any():
        for kk in sorted(rec_map):
            if kk > k:
                _record_dead(sums, rec_map, kk, kind, B, alive, tau, oms, vdrift, d)
    if kind == CAPPED:
        T_hit = np.where(np.isnan(T_hit), policy.cap_time, T_hit)
    times_used = times[: k + 1]
    res = EnsembleResult(policy, times_used, oms[: k + 1], tau, emb, emb_idx, ~np.isnan(tau), T_hit,
                         diag, [sums], B, d, paths)
    return res


def _compact(act: np.ndarray, logw: np.ndarray, idx: np.ndarray, cut: float):
    """Keep, per row, the atoms within ``cut`` of the row's top log-weight."""
    lw = logw[idx]
    top = np.max(lw, axis=1, keepdims=True)
    K = int(np.max(np.sum(lw > top - cut, axis=1)))
    K = max(K, 2)
    if K > 0.8 * act.shape[1]:
        return act, logw
    sel = np.argpartition(-logw, K - 1, axis=1)[:, :K]
    rows = np.arange(act.shape[0])[:, None]
    return act[rows, sel], logw[rows, sel]


def _record_dead(sums: _Sums, rec_map, k, kind, B, alive, tau, oms, vdrift, d, gi=None) -> None:
    """Collapsed trajectories contribute Gamma = 0; in the Foellmer case their drift keeps growing."""
    if rec_map is None or kind != FOELLMER:
        return
    if gi is None:
        if k not in rec_map:
            return
        gi = rec_map[k]
    dead = np.flatnonzero(~alive)
    if dead.size == 0:
        return
    s = oms[k]
    st = 1.0 - tau[dead]
    v2 = np.sum(vdrift[dead] ** 2, axis=1) + d * (1.0 / s - 1.0 / st)
    sums.add_constant(gi, "v2", v2, dead)


class _AllSteps:
    """Record at every step index 0..limit."""

    def __init__(self, limit: int):
        self.limit = limit

    def __contains__(self, k) -> bool:
        return 0 <= k <= self.limit

    def __getitem__(self, k: int) -> int:
        return k

    def __iter__(self):
        return iter(range(self.limit + 1))


def simulate(m: DiscreteMeasure, policy: Policy | str, cfg: EngineConfig, n_traj: int, *,
             tilt: bool = False, record=None, keep_traces: bool = False, store_path: bool = False,
             n_steps: int | None = None, first_index: int = 0) -> EnsembleResult:
    """Run ``n_traj`` trajectories (streams first_index..) in chunks, optionally on threads.

    ``record`` selects the step indices at which Gamma moments are accumulated:
    None (no moments), ``"all"``, or an increasing array of step indices.
    """
    policy = Policy.parse(policy)
    if n_traj < 1:
        raise ValueError("n_traj must be positive")
    starts = list(range(0, n_traj, cfg.chunk))

    def job(s0):
        gens = [stream(cfg.seed, first_index + i) for i in range(s0, min(s0 + cfg.chunk, n_traj))]
        return _run_chunk(m, policy, cfg, gens, tilt=tilt, record=record, keep_traces=keep_traces,
                          store_path=store_path, n_steps=n_steps)

    if cfg.threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
            parts = list(ex.map(job, starts))
    else:
        parts = [job(s0) for s0 in starts]
    if len(parts) == 1:
        return parts[0]
    longest = max(parts, key=lambda r: len(r.times))
    cat = lambda name: np.concatenate([getattr(r, name) for r in parts])
    paths = None
    if store_path:
        paths = [p for r in parts for p in r.paths]
    return EnsembleResult(policy, longest.times, longest.one_minus_t, cat("tau"), cat("embedded"),
                          cat("embedded_index"), cat("collapsed"), cat("T_hit"),
                          _merge_diag([r.diagnostics for r in parts]),
                          [s for r in parts for s in r.sums], n_traj, m.dim, paths)


# --------------------------------------------------------------------------
# moment grids


@dataclass(frozen=True, eq=False)
class MomentGrid:
    times: np.ndarray
    mean_gamma: np.ndarray
    mean_gamma2: np.ndarray
    mean_gamma4: np.ndarray
    se_gamma: np.ndarray
    se_gamma2: np.ndarray
    se_gamma4: np.ndarray
    tr_mean: dict
    tr_se: dict
    mean_A: np.ndarray
    var_gamma2: np.ndarray
    n_traj: int
    policy: Policy
    step_indices: np.ndarray
    traces: dict | None = None

    @property
    def sigma(self) -> np.ndarray:
        lam = np.linalg.eigvalsh(self.mean_gamma)
        return np.clip(lam[:, 0], 0.0, None)

    @property
    def dim(self) -> int:
        return self.mean_gamma.shape[-1]

    def jensen_gap(self) -> np.ndarray:
        """Smallest eigenvalue of E[G^2] - E[G]^2 + 3 se, per time (should be >= 0)."""
        gap = self.mean_gamma2 - self.mean_gamma @ self.mean_gamma
        tol = 3.0 * (self.se_gamma2.max(axis=(1, 2)) + 2 * np.abs(self.mean_gamma).max(axis=(1, 2))
                     * self.se_gamma.max(axis=(1, 2)))
        return np.linalg.eigvalsh(gap)[:, 0] + tol

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t", "Tr_E_Gamma", "Tr_E_Gamma2", "Tr_E_Gamma4", "sigma_t",
                     "se_Tr_E_Gamma", "se_Tr_E_Gamma2", "se_Tr_E_Gamma4"])
        sig = self.sigma
        for g, t in enumerate(self.times):
            wr.writerow([f"{x:.17g}" for x in (
                t, self.tr_mean["tr1"][g], self.tr_mean["tr2"][g], self.tr_mean["tr4"][g], sig[g],
                self.tr_se["tr1"][g], self.tr_se["tr2"][g], self.tr_se["tr4"][g])])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"policy": str(self.policy), "n_traj": self.n_traj, "t": self.times.tolist(),
                "mean_gamma": self.mean_gamma.tolist(), "mean_gamma2": self.mean_gamma2.tolist(),
                "mean_gamma4": self.mean_gamma4.tolist(), "sigma": self.sigma.tolist()}


def _mean_se(total, total_sq, n):
    mean = total / n
    var = np.clip(total_sq / n - mean**2, 0.0, None) * n / max(n - 1, 1)
    return mean, np.sqrt(var / n)


def moment_grid(res: EnsembleResult, step_indices: np.ndarray) -> MomentGrid:
    """Combine the partial sums of an ensemble run into per-time means and errors."""
    G = len(step_indices)
    d = res.d
    n = res.n_traj
    zero = {"g1": np.zeros((d, d)), "g2": np.zeros((d, d)), "g4": np.zeros((d, d)), "A": np.zeros((d, d))}
    keys = ["g1", "g2", "g4", "A", "g1sq", "g2sq", "g4sq", "tr1", "tr1sq", "tr2", "tr2sq", "tr4", "tr4sq"]
    extra = sorted({k for sm in res.sums for row in sm.rows.values() for k in row} - set(keys))
    tot = {k: np.zeros((G, d, d)) if k in zero or k.startswith("g") else np.zeros(G) for k in keys + extra}
    for sm in res.sums:
        for g, row in sm.rows.items():
            if g >= G:
                continue
            for k, v in row.items():
                tot[k][g] += v
    out = {}
    for k in ("g1", "g2", "g4"):
        out[k] = _mean_se(tot[k], tot[k + "sq"], n)
    tr_mean, tr_se = {}, {}
    for k in ["tr1", "tr2", "tr4"] + [e for e in extra if not e.endswith("sq")]:
        tr_mean[k], tr_se[k] = _mean_se(tot[k], tot[k + "sq"], n)
    mean_g2 = out["g2"][0]
    var_g2 = tr_mean["tr4"] - np.einsum("gij,gji->g", mean_g2, mean_g2)
    traces = None
    if any(sm.keep_traces for sm in res.sums):
        traces = {}
        offset = 0
        for sm in res.sums:
            for key, cols in sm.traces.items():
                arr = traces.setdefault(key, np.zeros((n, G)))
                for g, col in cols.items():
                    if g < G:
                        arr[offset:offset + sm.n_traj, g] = col
            offset += sm.n_traj
    times = res.times if len(res.times) >= max(step_indices) + 1 else None
    if times is None:
        raise EngineError("recording grid extends past the simulated steps")
    return MomentGrid(times[step_indices], out["g1"][0], out["g2"][0], out["g4"][0],
                      out["g1"][1], out["g2"][1], out["g4"][1], tr_mean, tr_se,
                      tot["A"] / n, np.clip(var_g2, 0.0, None), n, res.policy,
                      np.asarray(step_indices), traces)


def grid_indices(policy: Policy, cfg: EngineConfig, m: DiscreteMeasure, grid) -> np.ndarray:
    """Map requested grid times onto step indices of the engine grid (must coincide)."""
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be increasing")
    if policy.kind == FOELLMER:
        if np.any(grid >= 1):
            raise ValueError("Foellmer grid times must be below 1")
        pos = -np.log1p(-grid) / cfg.du
    else:
        pos = grid / cfg.step_size(m)
    idx = np.rint(pos).astype(int)
    if np.any(np.abs(pos - idx) > 1e-6):
        raise ValueError("grid times are not on the engine step grid")
    return idx


def gamma_moments(m: DiscreteMeasure, policy: Policy | str, cfg: EngineConfig, grid=None,
                  n_traj: int = 1000, rng=None, *, keep_traces: bool = False,
                  tilt: bool | None = None) -> MomentGrid:
    """Monte Carlo E[G], E[G^2], E[G^4] on a fixed grid, with G = 0 after collapse.

    ``grid=None`` records every engine step up to the horizon (or until all
    trajectories collapsed).  ``rng`` may override the master seed.
    """
    policy = Policy.parse(policy)
    if n_traj < 100:
        raise ValueError("n_traj must be at least 100")
    if rng is not None:
        cfg = replace(cfg, seed=int(rng.integers(2**63)))
    if tilt is None:
        tilt = policy.kind == FOELLMER
    if grid is None:
        res = simulate(m, policy, cfg, n_traj, tilt=tilt, record="all", keep_traces=keep_traces)
        idx = np.arange(len(res.times))
        return moment_grid(res, idx)
    idx = grid_indices(policy, cfg, m, grid)
    res = simulate(m, policy, cfg, n_traj, tilt=tilt, record=idx, keep_traces=keep_traces,
                   n_steps=int(idx[-1]))
    res.times = cfg.grid(policy, m, int(idx[-1]) + 1)[0]
    return moment_grid(res, idx)


# --------------------------------------------------------------------------
# single trajectories


def _single(m, policy, cfg, rng, *, tilt, store_path):
    res = _run_chunk(m, policy, cfg, [rng], tilt=tilt, record=None, keep_traces=False,
                     store_path=store_path, n_steps=None)
    rec = res.records()[0]
    if not rec.collapsed and policy.kind != FOELLMER and cfg.horizon is None:
        raise NoCollapseError(f"no collapse within {cfg.max_steps} steps")
    return replace(rec, grid=res.times)


def run_trajectory(m: DiscreteMeasure, policy: Policy | str, cfg: EngineConfig, rng,
                   store_path: bool = False) -> TrajectoryRecord:
    """One trajectory of the step engine until collapse."""
    return _single(m, Policy.parse(policy), cfg, rng, tilt=False, store_path=store_path)


def run_foellmer_tilt(m: DiscreteMeasure, cfg: EngineConfig, rng,
                      store_path: bool = False) -> TrajectoryRecord:
    """One Foellmer trajectory integrating only the linear tilt coefficient."""
    return _single(m, Policy(FOELLMER), cfg, rng, tilt=True, store_path=store_path)


def tilt_coefficient(t: float) -> float:
    """Quadratic tilt coefficient t / (1 - t) of the Foellmer process."""
    return t / (1.0 - t)


def dAt_residual(record: TrajectoryRecord, t_max: float | None = None) -> float:
    """Mean HS norm of A_{t+dt} - A_t - (M3[C dB] - A C^2 A dt) along a stored path.

    M3[h] is the third central moment contracted with h.  Steps up to the
    last stored one before collapse (and before ``t_max``) are averaged.
    """
    p = record.path
    if p is None:
        raise ValueError("record lacks full-path storage")
    times = np.asarray(p["times"])
    if len(times) < 2:
        return 0.0
    res = []
    for k in range(len(times) - 1):
        if t_max is not None and times[k + 1] > t_max:
            break
        w, A, C, dB, a = p["weights"][k], p["A"][k], p["C"][k], p["dB"][k], p["a"][k]
        dt = times[k + 1] - times[k]
        Xc = record_atoms(record) - a
        h = C @ dB
        m3 = (Xc * (w * (Xc @ h))[:, None]).T @ Xc
        pred = m3 - A @ C @ C @ A * dt
        res.append(np.sqrt(np.sum((p["A"][k + 1] - A - pred) ** 2)))
    return float(np.mean(res)) if res else 0.0


def record_atoms(record: TrajectoryRecord) -> np.ndarray:
    return record.path["atoms"]


def tilt_step_discrepancy(m: DiscreteMeasure, cfg: EngineConfig, n_traj: int, t_end: float) -> float:
    """Mean over trajectories of max_t |a_t(step) - a_t(tilt)| for t <= t_end on one noise path."""
    pol = Policy(FOELLMER)
    n = int(math.floor(-math.log1p(-t_end) / cfg.du + 1e-9))
    a = simulate(m, pol, cfg, n_traj, tilt=False, store_path=True, n_steps=n)
    b = simulate(m, pol, cfg, n_traj, tilt=True, store_path=True, n_steps=n)
    out = []
    for pa, pb in zip(a.paths, b.paths):
        L = min(len(pa["a"]), len(pb["a"]))
        if L == 0:
            out.append(0.0)
            continue
        diff = np.asarray(pa["a"][:L]) - np.asarray(pb["a"][:L])
        out.append(float(np.max(np.linalg.norm(diff, axis=1))))
    return float(np.mean(out))


def sigma_evolution_residual(record: TrajectoryRecord) -> tuple[float, np.ndarray, np.ndarray]:
    """Check that Foellmer step-engine log-weights stay an exact Gaussian tilt of mu.

    Returns the largest spread (over atoms) of log w_t - log w_0 - <h_t, x> + K_t |x|^2 / 2,
    where h and K are accumulated from the stored increments, together with
    the grid and K_t (to compare with t / (1 - t)).
    """
    p = record.path
    X = p["atoms"]
    w0 = None
    h = np.zeros(X.shape[1])
    K = 0.0
    worst = 0.0
    Ks = []
    times = np.asarray(p["times"])
    for k in range(len(times)):
        w = p["weights"][k]
        if w0 is None:
            w0 = w
        pos = (w > 1e-250) & (w0 > 0)
        resid = np.log(w[pos]) - np.log(w0[pos]) - X[pos] @ h + 0.5 * K * np.sum(X[pos] ** 2, axis=1)
        worst = max(worst, float(resid.max() - resid.min()))
        Ks.append(K)
        if k + 1 < len(times):
            dt = times[k + 1] - times[k]
            c = p["C"][k][0, 0]
            h = h + c * p["dB"][k] + c * c * p["a"][k] * dt
            K += c * c * dt
    return worst, times, np.asarray(Ks)
