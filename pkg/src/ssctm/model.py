"""Stochastic-switching cell transmission model (SS-CTM).

Cells and buffers are indexed from 0 in code: cell 0 is the most upstream
cell, buffer 0 stores the upstream mainline queue and buffers 1..K-1 are the
metered on-ramps.  Units follow the traffic-engineering convention used
throughout the package: km, km/hr, veh/hr, veh/km.

All flow functions accept scalars or numpy arrays (broadcasting), so the same
code path serves single-state evaluation and vectorized candidate scoring.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import DivisionByZeroRatio, NoRoot, SingularChain, ValidationError

# Tolerance for the fundamental-diagram check at config load (veh/hr).
FD_TOL = 1e-9


@dataclass(frozen=True)
class CellParams:
    length_km: float
    free_flow_speed_kmh: float
    congestion_wave_speed_kmh: float
    jam_density_veh_per_km: float
    mainline_ratio: float

    def __post_init__(self):
        for name in ("length_km", "free_flow_speed_kmh", "congestion_wave_speed_kmh",
                     "jam_density_veh_per_km"):
            val = getattr(self, name)
            if not np.isfinite(val) or val <= 0:
                raise ValidationError(name, f"must be a finite positive number, got {val!r}")
        if not 0.0 <= self.mainline_ratio <= 1.0:
            raise ValidationError("mainline_ratio", f"must lie in [0, 1], got {self.mainline_ratio!r}")


@dataclass(frozen=True)
class BufferParams:
    capacity_veh_per_hr: float
    demand_veh_per_hr: float

    def __post_init__(self):
        if not np.isfinite(self.capacity_veh_per_hr) or self.capacity_veh_per_hr <= 0:
            raise ValidationError("capacity_veh_per_hr",
                                  f"must be a finite positive number, got {self.capacity_veh_per_hr!r}")
        if not 0.0 <= self.demand_veh_per_hr <= self.capacity_veh_per_hr:
            raise ValidationError("demand_veh_per_hr",
                                  f"must lie in [0, U={self.capacity_veh_per_hr}], "
                                  f"got {self.demand_veh_per_hr!r}")


@dataclass(frozen=True)
class HighwayConfig:
    """Static geometry of a K-cell highway with one buffer per cell."""

    cells: tuple[CellParams, ...]
    buffers: tuple[BufferParams, ...]

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        object.__setattr__(self, "buffers", tuple(self.buffers))
        if len(self.cells) < 1:
            raise ValidationError("cells", "need at least one cell")
        if len(self.cells) != len(self.buffers):
            raise ValidationError("buffers", f"expected {len(self.cells)} buffers, got {len(self.buffers)}")
        if self.cells[-1].mainline_ratio != 0.0:
            raise ValidationError(f"cells[{len(self.cells) - 1}].mainline_ratio",
                                  "the last cell must have mainline ratio 0")
        for k, c in enumerate(self.cells[:-1]):
            if c.mainline_ratio == 0.0:
                raise DivisionByZeroRatio(f"cells[{k}].mainline_ratio is 0 on an interior cell")

    @classmethod
    def from_arrays(cls, length, v, w, n_jam, beta, U, alpha) -> "HighwayConfig":
        K = len(v)
        length = np.broadcast_to(np.asarray(length, float), (K,))
        cells = tuple(CellParams(float(length[k]), float(v[k]), float(w[k]), float(n_jam[k]), float(beta[k]))
                      for k in range(K))
        buffers = tuple(BufferParams(float(U[k]), float(alpha[k])) for k in range(K))
        return cls(cells, buffers)

    @property
    def K(self) -> int:
        return len(self.cells)

    @cached_property
    def length(self) -> np.ndarray:
        return np.array([c.length_km for c in self.cells])

    @cached_property
    def v(self) -> np.ndarray:
        return np.array([c.free_flow_speed_kmh for c in self.cells])

    @cached_property
    def w(self) -> np.ndarray:
        return np.array([c.congestion_wave_speed_kmh for c in self.cells])

    @cached_property
    def n_jam(self) -> np.ndarray:
        return np.array([c.jam_density_veh_per_km for c in self.cells])

    @cached_property
    def beta(self) -> np.ndarray:
        return np.array([c.mainline_ratio for c in self.cells])

    @cached_property
    def U(self) -> np.ndarray:
        return np.array([b.capacity_veh_per_hr for b in self.buffers])

    @cached_property
    def alpha(self) -> np.ndarray:
        return np.array([b.demand_veh_per_hr for b in self.buffers])

    def with_demands(self, alpha: Sequence[float]) -> "HighwayConfig":
        buffers = tuple(replace(b, demand_veh_per_hr=float(a)) for b, a in zip(self.buffers, alpha))
        return HighwayConfig(self.cells, buffers)

    def subsection(self, first: int, last: int, upstream_demand: float,
                   upstream_capacity: float | None = None) -> "HighwayConfig":
        """Cells ``first..last`` as a standalone highway.

        Buffer ``first`` becomes the upstream mainline buffer carrying
        ``upstream_demand``; the last cell of the section discharges freely.
        """
        cells = list(self.cells[first:last + 1])
        cells[-1] = replace(cells[-1], mainline_ratio=0.0)
        buffers = list(self.buffers[first:last + 1])
        cap = upstream_capacity if upstream_capacity is not None else max(upstream_demand, buffers[0].capacity_veh_per_hr)
        buffers[0] = BufferParams(float(cap), float(upstream_demand))
        return HighwayConfig(tuple(cells), tuple(buffers))


@dataclass(frozen=True)
class MarkovCapacityModel:
    """Modes of a continuous-time Markov chain and per-mode cell capacities."""

    capacities: np.ndarray  # (m, K) veh/hr
    rates: np.ndarray  # (m, m) /hr, zero diagonal

    def __post_init__(self):
        F = np.array(self.capacities, dtype=float, ndmin=2)
        lam = np.array(self.rates, dtype=float, ndmin=2)
        if F.ndim != 2:
            raise ValidationError("markov.capacities", "must be an m x K matrix")
        m = F.shape[0]
        if m == 1 and lam.size == 0:
            lam = np.zeros((1, 1))
        if lam.shape != (m, m):
            raise ValidationError("markov.rates", f"must be {m} x {m}, got shape {lam.shape}")
        if not np.all(np.isfinite(F)) or np.any(F <= 0):
            raise ValidationError("markov.capacities", "all capacities must be finite and positive")
        if not np.all(np.isfinite(lam)) or np.any(lam < 0):
            raise ValidationError("markov.rates", "rates must be finite and non-negative")
        if np.any(np.diag(lam) != 0):
            raise ValidationError("markov.rates", "diagonal rates must be zero")
        if m > 1:
            ncomp, _ = connected_components(lam > 0, directed=True, connection="strong")
            if ncomp != 1:
                raise ValidationError("markov.rates", "the mode chain is reducible (not strongly connected)")
        F.setflags(write=False)
        lam.setflags(write=False)
        object.__setattr__(self, "capacities", F)
        object.__setattr__(self, "rates", lam)

    @property
    def m(self) -> int:
        return self.capacities.shape[0]

    @property
    def K(self) -> int:
        return self.capacities.shape[1]

    @cached_property
    def generator(self) -> np.ndarray:
        """Infinitesimal generator: off-diagonal rates, rows summing to zero."""
        lam = np.array(self.rates)
        return lam - np.diag(lam.sum(axis=1))

    @property
    def F_max(self) -> np.ndarray:
        return self.capacities.max(axis=0)

    @property
    def F_min(self) -> np.ndarray:
        return self.capacities.min(axis=0)

    def restrict(self, cells: Sequence[int]) -> "MarkovCapacityModel":
        return MarkovCapacityModel(self.capacities[:, list(cells)], self.rates)

    def __eq__(self, other):
        if not isinstance(other, MarkovCapacityModel):
            return NotImplemented
        return (np.array_equal(self.capacities, other.capacities)
                and np.array_equal(self.rates, other.rates))

    def __hash__(self):
        return hash((self.capacities.tobytes(), self.rates.tobytes()))


def check_fundamental_diagram(cfg: HighwayConfig, markov: MarkovCapacityModel) -> None:
    """Raise unless v_k n_c <= w_k (n_jam - n_c) with n_c = F_k^max / v_k for every cell."""
    if markov.K != cfg.K:
        raise ValidationError("markov.capacities", f"expected {cfg.K} columns, got {markov.K}")
    n_c = markov.F_max / cfg.v
    receiving = cfg.w * (cfg.n_jam - n_c)
    for k in range(cfg.K):
        if markov.F_max[k] > receiving[k] + FD_TOL:
            raise ValidationError(
                f"markov.capacities[:, {k}]",
                f"capacity {markov.F_max[k]:g} exceeds the receiving flow {receiving[k]:g} "
                f"at the critical density of cell {k}")


@dataclass(frozen=True)
class HybridState:
    mode: int  # 0-based
    queues_veh: np.ndarray
    densities_veh_per_km: np.ndarray

    def __post_init__(self):
        q = np.array(self.queues_veh, dtype=float)
        n = np.array(self.densities_veh_per_km, dtype=float)
        if q.shape != n.shape or q.ndim != 1:
            raise ValidationError("state", "queues and densities must be vectors of equal length")
        if np.any(q < 0):
            raise ValidationError("state.queues_veh", "queues must be non-negative")
        if np.any(n < 0):
            raise ValidationError("state.densities_veh_per_km", "densities must be non-negative")
        object.__setattr__(self, "queues_veh", q)
        object.__setattr__(self, "densities_veh_per_km", n)

    @property
    def q(self) -> np.ndarray:
        return self.queues_veh

    @property
    def n(self) -> np.ndarray:
        return self.densities_veh_per_km

    def check_bounds(self, cfg: HighwayConfig, markov: MarkovCapacityModel | None = None) -> None:
        if np.any(self.n > cfg.n_jam):
            raise ValidationError("state.densities_veh_per_km", "densities must not exceed the jam density")
        if markov is not None and not 0 <= self.mode < markov.m:
            raise ValidationError("state.mode", f"mode must lie in [0, {markov.m - 1}]")


@dataclass(frozen=True)
class AffineControlPolicy:
    """Ramp metering mu_k(n) = u_k - kappa_k n_k for ramps 1..K-1 (0-based cells).

    ``u = inf`` marks an uncontrolled ramp.  ``kappa = 0`` is constant-rate
    metering; the design grids include it.
    """

    u_veh_per_hr: tuple[float, ...]
    kappa_kmh: tuple[float, ...]

    def __post_init__(self):
        u = tuple(float(x) for x in self.u_veh_per_hr)
        kap = tuple(float(x) for x in self.kappa_kmh)
        if len(u) != len(kap):
            raise ValidationError("policy", "u and kappa must have equal length")
        for i, (a, b) in enumerate(zip(u, kap)):
            if not a > 0:
                raise ValidationError(f"policy.u[{i}]", f"must be positive, got {a!r}")
            if not (b >= 0 and np.isfinite(b)):
                raise ValidationError(f"policy.kappa[{i}]", f"must be finite and non-negative, got {b!r}")
        object.__setattr__(self, "u_veh_per_hr", u)
        object.__setattr__(self, "kappa_kmh", kap)

    @classmethod
    def uncontrolled(cls, K: int) -> "AffineControlPolicy":
        return cls((np.inf,) * (K - 1), (0.0,) * (K - 1))

    @property
    def K(self) -> int:
        return len(self.u_veh_per_hr) + 1

    @cached_property
    def u_full(self) -> np.ndarray:
        """Length-K vector with ``inf`` at the mainline buffer."""
        return np.array((np.inf,) + self.u_veh_per_hr)

    @cached_property
    def kappa_full(self) -> np.ndarray:
        return np.array((0.0,) + self.kappa_kmh)

    def with_ramp(self, k: int, u: float, kappa: float) -> "AffineControlPolicy":
        """Copy with ramp ``k`` (0-based cell index, k >= 1) replaced."""
        us = list(self.u_veh_per_hr)
        ks = list(self.kappa_kmh)
        us[k - 1] = u
        ks[k - 1] = kappa
        return AffineControlPolicy(tuple(us), tuple(ks))

    def mu(self, k: int, n_k):
        """Control term max{0, u_k - kappa_k n_k}; ``inf`` for uncontrolled ramps."""
        u = self.u_full[k]
        if np.isinf(u):
            return np.full(np.shape(n_k), np.inf) if np.ndim(n_k) else np.inf
        return np.maximum(0.0, u - self.kappa_full[k] * n_k)


@dataclass(frozen=True)
class DensityBounds:
    lower_no_queue: np.ndarray
    lower_with_queue: np.ndarray
    upper_free: np.ndarray
    upper_blocked: np.ndarray
    nu: np.ndarray = field(default=None, repr=False)

    def lower(self, k: int, queued: bool) -> float:
        return float(self.lower_with_queue[k] if queued else self.lower_no_queue[k])


# ---------------------------------------------------------------------------
# Markov chain utilities
# ---------------------------------------------------------------------------

def steady_state_probs(markov: MarkovCapacityModel) -> np.ndarray:
    """Stationary distribution p of the mode chain (p Λ = 0, sum p = 1)."""
    m = markov.m
    if m == 1:
        return np.ones(1)
    gen = markov.generator
    if np.linalg.matrix_rank(gen) != m - 1:
        raise SingularChain(f"generator rank {np.linalg.matrix_rank(gen)} != {m - 1}")
    A = np.vstack([gen.T, np.ones((1, m))])
    rhs = np.zeros(m + 1)
    rhs[-1] = 1.0
    p, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    p = np.clip(p, 0.0, None)
    p /= p.sum()
    resid = np.max(np.abs(p @ gen))
    if resid > 1e-10 * max(1.0, np.abs(gen).max()):
        raise SingularChain(f"balance residual {resid:.3g} too large")
    return p


def capacity_stats(markov: MarkovCapacityModel, p: np.ndarray, k: int) -> tuple[float, float, float]:
    """(mean, max, min) capacity of cell ``k`` under the stationary distribution."""
    col = markov.capacities[:, k]
    return float(p @ col), float(col.max()), float(col.min())


# ---------------------------------------------------------------------------
# Flow functions
# ---------------------------------------------------------------------------

def _receiving(cfg: HighwayConfig, k: int, n_k):
    return cfg.w[k] * (cfg.n_jam[k] - n_k)


def mainline_inflow(q1, n1, cfg: HighwayConfig):
    """Flow r_1 from the upstream mainline buffer into cell 0."""
    cap = np.where(np.asarray(q1) > 0, cfg.U[0], cfg.alpha[0])
    out = np.maximum(0.0, np.minimum(cap, _receiving(cfg, 0, n1)))
    return out if np.ndim(out) else float(out)


def onramp_flow(k: int, q_k, n_k, cfg: HighwayConfig, policy: AffineControlPolicy | None,
                metered=True):
    """Controlled on-ramp flow from buffer ``k`` (k >= 1) into cell ``k``.

    ``metered=False`` (or an array mask) drops the control term, as when the
    queue cap forces the meter off.
    """
    if k < 1:
        raise ValueError("on-ramp index must be >= 1 (0 is the mainline buffer)")
    cap = np.where(np.asarray(q_k) > 0, cfg.U[k], cfg.alpha[k])
    out = np.minimum(cap, _receiving(cfg, k, n_k))
    if policy is not None:
        mu = policy.mu(k, n_k)
        out = np.where(metered, np.minimum(out, mu), out)
    out = np.maximum(0.0, out)
    return out if np.ndim(out) else float(out)


def buffer_flow(k: int, q_k, n_k, cfg: HighwayConfig, policy: AffineControlPolicy | None):
    return mainline_inflow(q_k, n_k, cfg) if k == 0 else onramp_flow(k, q_k, n_k, cfg, policy)


def cell_outflow(k: int, state: HybridState, policy: AffineControlPolicy | None,
                 cfg: HighwayConfig, markov: MarkovCapacityModel):
    """Outflow f_k of cell ``k`` in the state's mode."""
    n, q = state.n, state.q
    send = min(cfg.v[k] * n[k], markov.capacities[state.mode, k])
    if k == cfg.K - 1:
        return max(0.0, send)
    if cfg.beta[k] == 0:
        raise DivisionByZeroRatio(f"cell {k} has zero mainline ratio")
    r_next = onramp_flow(k + 1, q[k + 1], n[k + 1], cfg, policy)
    recv = max(0.0, _receiving(cfg, k + 1, n[k + 1]) - r_next) / cfg.beta[k]
    return max(0.0, min(send, recv))


def flows(state: HybridState, policy: AffineControlPolicy | None, cfg: HighwayConfig,
          markov: MarkovCapacityModel) -> tuple[np.ndarray, np.ndarray]:
    """Buffer-to-cell flows r and cell outflows f for a single state."""
    K = cfg.K
    r = np.array([buffer_flow(k, state.q[k], state.n[k], cfg, policy) for k in range(K)], dtype=float)
    f = np.empty(K)
    F = markov.capacities[state.mode]
    for k in range(K):
        send = min(cfg.v[k] * state.n[k], F[k])
        if k < K - 1:
            recv = max(0.0, _receiving(cfg, k + 1, state.n[k + 1]) - r[k + 1]) / cfg.beta[k]
            send = min(send, recv)
        f[k] = max(0.0, send)
    return r, f


def dynamics(state: HybridState, policy: AffineControlPolicy | None, cfg: HighwayConfig,
             markov: MarkovCapacityModel) -> tuple[np.ndarray, np.ndarray]:
    """Queue rates G (veh/hr) and density rates H (veh/km/hr)."""
    r, f = flows(state, policy, cfg, markov)
    G = cfg.alpha - r
    upstream = np.concatenate([[0.0], cfg.beta[:-1] * f[:-1]])
    H = (upstream + r - f) / cfg.length
    return G, H


# ---------------------------------------------------------------------------
# Density bounds
# ---------------------------------------------------------------------------

def ramp_breakpoints(cap: float, w: float, n_jam: float, u: float, kappa: float) -> list[float]:
    """Densities where min{cap, w (n_jam - n), max(0, u - kappa n)} can switch pieces."""
    pts = [n_jam - cap / w, n_jam]
    if np.isfinite(u):
        if kappa > 0:
            with np.errstate(over="ignore"):
                pts += [(u - cap) / kappa, u / kappa]
        if w != kappa:
            pts.append((w * n_jam - u) / (w - kappa))
    return pts


def _queued_ramp_flow(k: int, n, cfg: HighwayConfig, policy: AffineControlPolicy | None):
    """r_k(1, n): ramp flow with a queue present; k = 0 gives the mainline inflow."""
    if k == 0:
        return mainline_inflow(1.0, n, cfg)
    return onramp_flow(k, 1.0, n, cfg, policy)


def _solve_nu(k: int, inflow: float, cfg: HighwayConfig, policy: AffineControlPolicy | None) -> float:
    """Root of inflow + r_k(1, nu) = v_k nu by exact piecewise-linear search."""
    v, jam = cfg.v[k], cfg.n_jam[k]
    u = policy.u_full[k] if policy is not None else np.inf
    kap = policy.kappa_full[k] if policy is not None else 0.0
    pts = [0.0, jam] + [x for x in ramp_breakpoints(cfg.U[k], cfg.w[k], jam, u, kap) if 0.0 < x < jam]
    pts = np.unique(np.array(pts, dtype=float))

    def h(x):
        return inflow + _queued_ramp_flow(k, x, cfg, policy) - v * x

    vals = np.array([h(x) for x in pts])
    if vals[0] < 0 or vals[-1] > 0:
        raise NoRoot(f"cell {k}: no nu in [0, {jam}] (h(0)={vals[0]:.6g}, h(jam)={vals[-1]:.6g})")
    for a, b, ha, hb in zip(pts[:-1], pts[1:], vals[:-1], vals[1:]):
        if ha == 0:
            return float(a)
        if ha > 0 >= hb:
            # h is affine on [a, b]
            return float(a + (b - a) * ha / (ha - hb))
    return float(pts[-1])


def min_receiving_margin(k: int, lo: float, hi: float, cfg: HighwayConfig,
                         policy: AffineControlPolicy | None) -> float:
    """min over n in [lo, hi] of w_k (n_jam_k - n) - r_k(1, n), exact."""
    u = policy.u_full[k] if policy is not None else np.inf
    kap = policy.kappa_full[k] if policy is not None else 0.0
    pts = [lo, hi] + [x for x in ramp_breakpoints(cfg.U[k], cfg.w[k], cfg.n_jam[k], u, kap) if lo < x < hi]
    pts = np.array(pts)
    vals = _receiving(cfg, k, pts) - _queued_ramp_flow(k, pts, cfg, policy)
    return float(vals.min())


def density_bounds(cfg: HighwayConfig, markov: MarkovCapacityModel,
                   policy: AffineControlPolicy | None) -> DensityBounds:
    """Lower/upper density boundaries used to build invariant and congestion sets."""
    K = cfg.K
    v, w, jam, beta = cfg.v, cfg.w, cfg.n_jam, cfg.beta
    Fmax, Fmin = markov.F_max, markov.F_min

    low = np.empty(K)
    low[0] = min(cfg.alpha[0], Fmax[0]) / v[0]
    for k in range(1, K):
        up = beta[k - 1] * min(v[k - 1] * low[k - 1], Fmin[k - 1])
        low[k] = min(up + cfg.alpha[k], Fmax[k]) / v[k]

    lowq = np.empty(K)
    nu = np.full(K, np.nan)
    lowq[0] = min(cfg.U[0], Fmax[0]) / v[0]
    for k in range(1, K):
        up = beta[k - 1] * min(v[k - 1] * low[k - 1], Fmin[k - 1])
        nu[k] = _solve_nu(k, up, cfg, policy)
        lowq[k] = min(nu[k], Fmax[k] / v[k])

    upper = jam - Fmin / w
    blocked = np.empty(K)
    blocked[K - 1] = upper[K - 1]
    for k in range(K - 2, -1, -1):
        R = min_receiving_margin(k + 1, low[k + 1], blocked[k + 1], cfg, policy)
        R = max(R, 0.0)
        blocked[k] = jam[k] - min(Fmin[k], R / beta[k]) / w[k]

    for arr in (low, lowq, upper, blocked, nu):
        arr.setflags(write=False)
    return DensityBounds(low, lowq, upper, blocked, nu)
