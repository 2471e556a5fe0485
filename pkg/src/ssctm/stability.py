"""Lyapunov-drift stability certificates for affine ramp metering.

Buffers and cells are 0-based.  A congestion set for buffer k is a union of
boxes, each box fixing the queue indicators of all buffers and giving an
interval (possibly a single point) for every density.  The weighted net flow
over a box is maximized exactly by :mod:`ssctm.inner`.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import inner
from .errors import SingularChain, ValidationError
from .model import (AffineControlPolicy, DensityBounds, HighwayConfig, HybridState,
                    MarkovCapacityModel, density_bounds, dynamics, min_receiving_margin,
                    onramp_flow, steady_state_probs)

LOCALIZED = "localized"
FULL = "full"
PARTIAL = "partial"
STABLE_EPS = 1e-9

# weight variants for the partially coordinated scheme
PC_PRINTED = "printed"  # (n - bar n) / (tilde n - bar n), clamped to [0, 1]
PC_PRINTED_RAW = "printed-raw"  # same, unclamped
PC_UNDERLINE = "underline"  # (n - underline n) / (tilde n - underline n)


@dataclass(frozen=True)
class DesignScheme:
    variant: str = FULL
    pc_weight: str = PC_UNDERLINE
    unit_weights: bool = False

    def __post_init__(self):
        if self.variant not in (LOCALIZED, FULL, PARTIAL):
            raise ValidationError("scheme", f"unknown variant {self.variant!r}")
        if self.pc_weight not in (PC_PRINTED, PC_PRINTED_RAW, PC_UNDERLINE):
            raise ValidationError("pc_weight", f"unknown weight variant {self.pc_weight!r}")

    def check(self, K: int) -> None:
        if self.variant == LOCALIZED and K != 2:
            raise ValidationError("scheme", "the localized scheme needs exactly two cells")


@dataclass(frozen=True)
class CongestionSet:
    """One box of a congestion set: fixed queue indicators, density intervals."""

    buffer: int
    queued: tuple[bool, ...]
    lo: np.ndarray
    hi: np.ndarray

    @property
    def pinned(self) -> np.ndarray:
        return self.hi <= self.lo


@dataclass(frozen=True)
class WeightScheme:
    kind: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __call__(self, n):
        obj = inner.NetFlowObjective(*([np.zeros(len(self.kind))] * 10), self.kind, self.a, self.b)
        return obj.rho(np.asarray(n, dtype=float))


@dataclass
class DriftEntry:
    buffer: int
    mode: int
    value: float
    argmax_density: np.ndarray
    argmax_queued: tuple[bool, ...]


@dataclass
class DriftReport:
    scheme: str
    entries: list[DriftEntry]
    buffer_means: np.ndarray
    probs: np.ndarray
    checked_buffers: tuple[int, ...] = ()

    @property
    def mean_drift(self) -> float:
        return float(np.max(self.buffer_means[list(self.checked_buffers)]))

    @property
    def stable(self) -> bool:
        return self.mean_drift < -STABLE_EPS

    @property
    def verdict(self) -> str:
        return "Stable" if self.stable else "Unknown"

    @property
    def queue_bound_proxy(self) -> float:
        """-1 / D-bar: the queue bound up to the unknown positive constant d."""
        d = self.mean_drift
        return -1.0 / d if d < 0 else float("inf")

    def to_text(self) -> str:
        lines = [f"scheme: {self.scheme}",
                 f"mean drift: {self.mean_drift:.6f} veh/hr",
                 f"verdict: {self.verdict}",
                 f"queue-bound proxy (-1/D): {self.queue_bound_proxy:.6g}"]
        for k in self.checked_buffers:
            lines.append(f"buffer {k + 1}: mean {self.buffer_means[k]:.6f}")
            for e in self.entries:
                if e.buffer == k:
                    n = ", ".join(f"{x:.4f}" for x in e.argmax_density)
                    q = "".join("1" if x else "0" for x in e.argmax_queued)
                    lines.append(f"  mode {e.mode + 1}: D = {e.value:.6f} at q = {q}, n = ({n})")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        K = len(self.entries[0].argmax_density) if self.entries else 0
        wr.writerow(["buffer", "mode", "D", *[f"q_{j + 1}" for j in range(K)],
                     *[f"n_{j + 1}" for j in range(K)]])
        for e in self.entries:
            wr.writerow([e.buffer + 1, e.mode + 1, repr(float(e.value)),
                         *[int(x) for x in e.argmax_queued], *[repr(float(x)) for x in e.argmax_density]])
        return buf.getvalue()


@dataclass(frozen=True)
class LyapunovCertificate:
    b: np.ndarray  # (m, K)
    residual: float


@dataclass(frozen=True)
class InvariantSet:
    boxes: tuple[tuple[tuple[bool, ...], np.ndarray, np.ndarray], ...]

    def __len__(self):
        return len(self.boxes)

    def contains(self, q, n, tol=0.0) -> bool:
        q = np.asarray(q, dtype=float)
        n = np.asarray(n, dtype=float)
        tol = np.broadcast_to(np.asarray(tol, dtype=float), n.shape)
        ind = tuple(bool(x) for x in q > 0)
        for queued, lo, hi in self.boxes:
            if queued == ind and np.all(n >= lo - tol) and np.all(n <= hi + tol):
                return True
        return False

    def box_for(self, q) -> tuple[np.ndarray, np.ndarray]:
        ind = tuple(bool(x) for x in np.asarray(q) > 0)
        for queued, lo, hi in self.boxes:
            if queued == ind:
                return lo, hi
        raise KeyError(ind)

    def as_arrays(self):
        """(2^K, K) lower and upper bounds indexed by the queue bitmask sum_j q_j 2^j."""
        K = len(self.boxes[0][0])
        lo = np.full((2 ** K, K), np.nan)
        hi = np.full((2 ** K, K), np.nan)
        for queued, blo, bhi in self.boxes:
            idx = sum(1 << j for j, x in enumerate(queued) if x)
            lo[idx], hi[idx] = blo, bhi
        return lo, hi


# ---------------------------------------------------------------------------
# coefficients and weights
# ---------------------------------------------------------------------------

def gamma(j: int, k: int, betas: Sequence[float]) -> float:
    """Share of cell j outflow reaching cell k (0-based, j <= k)."""
    if j > k:
        raise ValueError("gamma needs j <= k")
    out = 1.0
    for ell in range(k - 1, j - 1, -1):
        out = betas[ell] * out
    return float(out)


def coupling(k: int, betas: Sequence[float]) -> np.ndarray:
    """c_j = gamma(j, k) for j <= k and gamma(k, j) for j > k.

    Upstream entries are built right-to-left so that c_j - beta_j c_{j+1} is
    exactly zero there.
    """
    K = len(betas)
    c = np.empty(K)
    c[k] = 1.0
    for j in range(k - 1, -1, -1):
        c[j] = betas[j] * c[j + 1]
    for j in range(k + 1, K):
        c[j] = c[j - 1] * betas[j - 1]
    return c


def weights(scheme: DesignScheme, k: int, bounds: DensityBounds, K: int) -> WeightScheme:
    """Weight descriptors rho_j for buffer k under the given scheme."""
    kind = np.full(K, inner.RHO_ONE)
    a = np.zeros(K)
    b = np.ones(K)
    lower = np.asarray(bounds.lower_no_queue)
    if scheme.unit_weights:
        return WeightScheme(kind, a, b)
    if scheme.variant == LOCALIZED:
        kind[1] = inner.RHO_AFFINE
        a[1], b[1] = lower[1], bounds.upper_free[1]
    elif scheme.variant == FULL:
        for j in range(1, K):
            kind[j] = inner.RHO_AFFINE
            a[j], b[j] = lower[j], bounds.upper_blocked[j]
    else:
        for j in range(k, K):
            if scheme.pc_weight == PC_UNDERLINE:
                kind[j] = inner.RHO_AFFINE
                a[j], b[j] = lower[j], bounds.upper_blocked[j]
            else:
                kind[j] = inner.RHO_CLAMPED if scheme.pc_weight == PC_PRINTED else inner.RHO_AFFINE
                a[j], b[j] = bounds.upper_free[j], bounds.upper_blocked[j]
                if b[j] - a[j] <= 1e-12:
                    # degenerate denominator: tilde n = bar n (always true for the
                    # last cell); every density in the set lies at or below bar n,
                    # where the clamped weight is 0
                    kind[j] = inner.RHO_ZERO
    bad = (kind == inner.RHO_AFFINE) & (np.abs(b - a) <= 1e-12)
    if bad.any():
        raise ValidationError("weights", f"degenerate weight denominator for cells {np.where(bad)[0].tolist()}")
    return WeightScheme(kind, a, b)


# ---------------------------------------------------------------------------
# congestion sets and invariant sets
# ---------------------------------------------------------------------------

def _interval(bounds: DensityBounds, j: int, queued: bool, upper: np.ndarray):
    lo = bounds.lower_with_queue[j] if queued else bounds.lower_no_queue[j]
    return float(lo), float(upper[j])


def congestion_sets(scheme: DesignScheme, bounds: DensityBounds, K: int,
                    buffers: Sequence[int] | None = None) -> dict[int, list[CongestionSet]]:
    """Boxes making up E_k for each requested buffer k."""
    scheme.check(K)
    if buffers is None:
        buffers = range(K)
    out = {}
    low, lowq = bounds.lower_no_queue, bounds.lower_with_queue
    for k in buffers:
        boxes = []
        if scheme.variant == LOCALIZED:
            bar = bounds.upper_free
            if k == 0:
                boxes.append(CongestionSet(0, (True, False), np.array([lowq[0], low[1]]),
                                           np.array([lowq[0], bar[1]])))
                boxes.append(CongestionSet(0, (True, True), np.array([lowq[0], lowq[1]]),
                                           np.array([lowq[0], bar[1]])))
            else:
                boxes.append(CongestionSet(1, (False, True), np.array([low[0], lowq[1]]),
                                           np.array([low[0], bar[1]])))
        elif scheme.variant == FULL:
            up = bounds.upper_blocked
            others = [j for j in range(K) if j != k]
            for bits in itertools.product((False, True), repeat=K - 1):
                queued = [False] * K
                queued[k] = True
                for j, bit in zip(others, bits):
                    queued[j] = bit
                lo = np.array([_interval(bounds, j, queued[j], up)[0] for j in range(K)])
                hi = np.array([up[j] for j in range(K)], dtype=float)
                boxes.append(CongestionSet(k, tuple(queued), lo, hi))
        else:
            up = bounds.upper_blocked
            down = list(range(k + 1, K))
            for bits in itertools.product((False, True), repeat=len(down)):
                queued = [False] * K
                queued[k] = True
                for j, bit in zip(down, bits):
                    queued[j] = bit
                lo = np.empty(K)
                hi = np.empty(K)
                for j in range(K):
                    if j < k - 1:
                        # outside the set: these densities carry zero weight
                        lo[j] = hi[j] = low[j]
                    elif j == k - 1:
                        lo[j] = hi[j] = low[j]
                    else:
                        lo[j], hi[j] = _interval(bounds, j, queued[j], up)
                boxes.append(CongestionSet(k, tuple(queued), lo, hi))
        out[k] = boxes
    return out


def invariant_set(scheme: DesignScheme, bounds: DensityBounds, K: int) -> InvariantSet:
    """Union of 2^K boxes, one per queue-indicator pattern."""
    scheme.check(K)
    up = bounds.upper_blocked
    boxes = []
    for bits in itertools.product((False, True), repeat=K):
        lo = np.array([_interval(bounds, j, bits[j], up)[0] for j in range(K)])
        boxes.append((tuple(bits), lo, np.array(up, dtype=float)))
    return InvariantSet(tuple(boxes))


# ---------------------------------------------------------------------------
# net flows
# ---------------------------------------------------------------------------

def net_flow_objective(scheme: DesignScheme, k: int, mode: int, queued: Sequence[bool],
                       policy: AffineControlPolicy | None, cfg: HighwayConfig,
                       markov: MarkovCapacityModel, bounds: DensityBounds,
                       metered: Sequence[bool] | None = None) -> inner.NetFlowObjective:
    K = cfg.K
    ws = weights(scheme, k, bounds, K)
    queued = np.asarray(queued, dtype=bool)
    cap = np.where(queued, cfg.U, cfg.alpha)
    if policy is None:
        u = np.full(K, np.inf)
        kap = np.zeros(K)
    else:
        u = policy.u_full.copy()
        kap = policy.kappa_full.copy()
    if metered is not None:
        off = ~np.asarray(metered, dtype=bool)
        u[off] = np.inf
        kap[off] = 0.0
    return inner.NetFlowObjective(
        c=coupling(k, cfg.beta), alpha=cfg.alpha.copy(), beta=cfg.beta.copy(), v=cfg.v.copy(),
        w=cfg.w.copy(), jam=cfg.n_jam.copy(), F=markov.capacities[mode].astype(float),
        cap=cap, u=u, kappa=kap, rho_kind=ws.kind, rho_a=ws.a, rho_b=ws.b)


def weighted_net_flow(scheme: DesignScheme, k: int, state: HybridState, policy: AffineControlPolicy | None,
                      cfg: HighwayConfig, markov: MarkovCapacityModel, bounds: DensityBounds,
                      form: str = "direct") -> float:
    """D_k at a single state, from the dynamics ("direct") or the expanded sum ("expanded")."""
    if form == "expanded":
        obj = net_flow_objective(scheme, k, state.mode, state.q > 0, policy, cfg, markov, bounds)
        return float(obj.value(state.n))
    G, H = dynamics(state, policy, cfg, markov)
    c = coupling(k, cfg.beta)
    rho = weights(scheme, k, bounds, cfg.K)(state.n)
    return float(np.sum(c * (G + cfg.length * rho * H)))


def max_net_flow_over_set(scheme: DesignScheme, k: int, mode: int, box: CongestionSet,
                          policy: AffineControlPolicy | None, cfg: HighwayConfig,
                          markov: MarkovCapacityModel, bounds: DensityBounds,
                          fallback: inner.FallbackOptions | None = None):
    obj = net_flow_objective(scheme, k, mode, box.queued, policy, cfg, markov, bounds)
    return inner.maximize(obj, box.lo, box.hi, fallback=fallback)


def _mode_groups(markov: MarkovCapacityModel, p: np.ndarray):
    """Representative modes with aggregated probability (identical capacity rows merge)."""
    rows, reps, probs = {}, [], []
    for s in range(markov.m):
        key = markov.capacities[s].tobytes()
        if key in rows:
            probs[rows[key]] += p[s]
        else:
            rows[key] = len(reps)
            reps.append(s)
            probs.append(p[s])
    return reps, np.array(probs)


def buffer_drift(scheme: DesignScheme, k: int, policy: AffineControlPolicy | None, cfg: HighwayConfig,
                 markov: MarkovCapacityModel, bounds: DensityBounds | None = None,
                 p: np.ndarray | None = None, fallback: inner.FallbackOptions | None = None):
    """(sum_s p_s D_{k,s}(E_k), entries)."""
    if bounds is None:
        bounds = density_bounds(cfg, markov, policy)
    if p is None:
        p = steady_state_probs(markov)
    boxes = congestion_sets(scheme, bounds, cfg.K, [k])[k]
    reps, probs = _mode_groups(markov, p)
    total = 0.0
    entries = []
    for s, ps in zip(reps, probs):
        best, arg, argq = -np.inf, None, None
        for box in boxes:
            val, n = max_net_flow_over_set(scheme, k, s, box, policy, cfg, markov, bounds, fallback)
            if val > best:
                best, arg, argq = val, n, box.queued
        for s2 in range(markov.m):
            if np.array_equal(markov.capacities[s2], markov.capacities[s]):
                entries.append(DriftEntry(k, s2, best, arg, argq))
        total += ps * best
    entries.sort(key=lambda e: e.mode)
    return float(total), entries


def mean_drift(scheme: DesignScheme, policy: AffineControlPolicy | None, cfg: HighwayConfig,
               markov: MarkovCapacityModel, fallback: inner.FallbackOptions | None = None,
               buffers: Sequence[int] | None = None, bounds: DensityBounds | None = None) -> DriftReport:
    """Mean drift D-bar = max_k sum_s p_s D_{k,s}(E_k) for the scheme."""
    scheme.check(cfg.K)
    if bounds is None:
        bounds = density_bounds(cfg, markov, policy)
    p = steady_state_probs(markov)
    if buffers is None:
        buffers = range(cfg.K)
    means = np.full(cfg.K, np.nan)
    entries = []
    for k in buffers:
        means[k], ent = buffer_drift(scheme, k, policy, cfg, markov, bounds, p, fallback)
        entries.extend(ent)
    return DriftReport(scheme.variant, entries, means, p, tuple(buffers))


# ---------------------------------------------------------------------------
# b-system
# ---------------------------------------------------------------------------

def solve_b_system(z: np.ndarray, markov: MarkovCapacityModel, p: np.ndarray | None = None) -> LyapunovCertificate:
    """Non-negative b with z_{s,k} + sum_s' lam_{s,s'} (b_{s',k} - b_{s,k}) = sum_s' p_s' z_{s',k}."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    m = markov.m
    if z.shape[0] != m:
        raise ValidationError("z", f"expected {m} rows, got {z.shape[0]}")
    if p is None:
        p = steady_state_probs(markov)
    gen = markov.generator
    if m == 1:
        return LyapunovCertificate(np.zeros_like(z), 0.0)
    rank = np.linalg.matrix_rank(gen)
    if rank != m - 1:
        raise SingularChain(f"generator rank {rank} != {m - 1}")
    rhs = (p @ z)[None, :] - z
    b, *_ = np.linalg.lstsq(gen, rhs, rcond=None)
    b = b - b.min(axis=0, keepdims=True)
    res = float(np.max(np.abs(z + gen @ b - (p @ z)[None, :])))
    if res >= 1e-9 * max(1.0, float(np.abs(z).max())):
        raise SingularChain(f"b-system residual {res:.3g}")
    return LyapunovCertificate(b, res)


# ---------------------------------------------------------------------------
# decoupling and the closed-form special cases
# ---------------------------------------------------------------------------

def check_decoupling(policy: AffineControlPolicy | None, cfg: HighwayConfig, markov: MarkovCapacityModel,
                     bounds: DensityBounds | None = None) -> np.ndarray:
    """Per interface k (cells k, k+1): receiving room minus queued ramp flow >= beta_k F_k^max
    on [underline n_{k+1}, bar n_{k+1}]."""
    if bounds is None:
        bounds = density_bounds(cfg, markov, policy)
    out = np.zeros(cfg.K - 1, dtype=bool)
    for k in range(cfg.K - 1):
        lo, hi = bounds.lower_no_queue[k + 1], bounds.upper_free[k + 1]
        margin = min_receiving_margin(k + 1, min(lo, hi), max(lo, hi), cfg, policy)
        out[k] = margin >= cfg.beta[k] * markov.F_max[k]
    return out


@dataclass(frozen=True)
class DecoupledVerdict:
    applicable: bool
    stable_iff: bool | None


def decoupled_verdict(cfg: HighwayConfig, markov: MarkovCapacityModel,
                       policy: AffineControlPolicy) -> DecoupledVerdict:
    if cfg.K != 2:
        raise ValidationError("cfg", "the two-cell special case needs K = 2")
    p = steady_state_probs(markov)
    Fbar = p @ markov.capacities
    Fmax, Fmin = markov.F_max, markov.F_min
    n2c = Fmax[1] / cfg.v[1]
    b1 = cfg.beta[0]
    applicable = bool(
        cfg.U[0] >= Fmax[0]
        and b1 * Fmin[0] + onramp_flow(1, 0.0, n2c, cfg, policy) >= Fmax[1]
        and b1 * cfg.alpha[0] + onramp_flow(1, 1.0, n2c, cfg, policy) >= Fmax[1]
        and check_decoupling(policy, cfg, markov)[0]
    )
    if not applicable:
        return DecoupledVerdict(False, None)
    ok = bool(cfg.alpha[0] < Fbar[0] and b1 * cfg.alpha[0] + cfg.alpha[1] < Fbar[1])
    return DecoupledVerdict(True, ok)


def pc_decoupled_conditions(cfg: HighwayConfig, markov: MarkovCapacityModel,
                          policy: AffineControlPolicy) -> bool:
    Fmax, Fmin = markov.F_max, markov.F_min
    if not cfg.U[0] >= Fmax[0]:
        return False
    if not check_decoupling(policy, cfg, markov).all():
        return False
    for k in range(1, cfg.K):
        nc = Fmax[k] / cfg.v[k]
        if cfg.beta[k - 1] * Fmin[k - 1] + onramp_flow(k, 0.0, nc, cfg, policy) < Fmax[k]:
            return False
        upstream = sum(gamma(i, k, cfg.beta) * cfg.alpha[i] for i in range(k))
        if upstream + onramp_flow(k, 1.0, nc, cfg, policy) < Fmax[k]:
            return False
    return True


def pc_equivalence_check(cfg: HighwayConfig, markov: MarkovCapacityModel,
                                 pc_policy: AffineControlPolicy, tol: float = 1e-6) -> bool:
    """Cross-check of the decoupled special case.

    Returns False when the decoupling conditions fail.  Otherwise evaluates the
    mean drift of ``pc_policy`` with unit weights over the partially
    coordinated sets and over the fully coordinated sets and returns whether
    the two agree to ``tol`` (relative).
    """
    if not pc_decoupled_conditions(cfg, markov, pc_policy):
        return False
    pc = mean_drift(DesignScheme(PARTIAL, unit_weights=True), pc_policy, cfg, markov)
    fc = mean_drift(DesignScheme(FULL, unit_weights=True), pc_policy, cfg, markov)
    a, b = pc.mean_drift, fc.mean_drift
    return bool(abs(a - b) <= tol * max(1.0, abs(a), abs(b)))
