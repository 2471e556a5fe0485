"""Grid-search synthesis of affine ramp-metering policies.

Every design evaluates the mean drift of candidate policies and keeps the
smallest one.  Candidates are ordered lexicographically by (u, kappa) over the
designed ramps; among candidates whose drifts agree to ``TIE_RTOL`` the first
in that order wins, so results do not depend on evaluation order or thread
count.

Exact drift evaluations are the expensive part.  Each candidate first gets a
cheap lower bound (the objective sampled at box corners and centres), then
candidates are evaluated exactly in increasing bound order until the bound
exceeds the best drift found.  This never changes the answer.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import ttest_rel

from . import inner
from .baselines import ALINEA, METALINE, BaselineSpec, baseline_control_step  # noqa: F401
from .errors import NoRoot, SubproblemInfeasible, TooLarge, ValidationError
from .model import (AffineControlPolicy, HighwayConfig, MarkovCapacityModel, density_bounds,
                    steady_state_probs)
from .simulator import SimConfig, make_rng, mode_path, run_metrics
from .stability import (FULL, LOCALIZED, PARTIAL, STABLE_EPS, DesignScheme, DriftReport,
                        buffer_drift, congestion_sets, gamma, mean_drift, net_flow_objective)

log = logging.getLogger(__name__)

TIE_RTOL = 1e-9
GRID_CAP = 1_000_000
FULL_MAX_K = 3
DEFAULT_U = (2500.0, 6000.0, 50.0)
DEFAULT_KAPPA = (0.0, 50.0, 1.0)


def _axis(lo: float, hi: float, step: float) -> np.ndarray:
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return np.round(lo + step * np.arange(n), 9)


@dataclass(frozen=True)
class GridSpec:
    """(lo, hi, step) ranges for u and kappa, one pair per designed ramp.

    ``lo == hi`` pins the parameter (e.g. kappa fixed at 25).
    """

    u_range: tuple[tuple[float, float, float], ...]
    kappa_range: tuple[tuple[float, float, float], ...]
    cap: int = GRID_CAP

    def __post_init__(self):
        u = tuple(tuple(float(x) for x in r) for r in self.u_range)
        kap = tuple(tuple(float(x) for x in r) for r in self.kappa_range)
        if len(u) != len(kap) or not u:
            raise ValidationError("grid", "need one u and one kappa range per ramp")
        for name, rs in (("u", u), ("kappa", kap)):
            for i, (lo, hi, step) in enumerate(rs):
                if len((lo, hi, step)) != 3 or not (np.isfinite(lo) and np.isfinite(hi)):
                    raise ValidationError(f"grid.{name}[{i}]", "range must be finite (lo, hi, step)")
                if lo > hi:
                    raise ValidationError(f"grid.{name}[{i}]", f"lo {lo} exceeds hi {hi}")
                if not step > 0:
                    raise ValidationError(f"grid.{name}[{i}]", "step must be positive")
                if name == "u" and lo <= 0:
                    raise ValidationError(f"grid.{name}[{i}]", "u must be positive")
                if name == "kappa" and lo < 0:
                    raise ValidationError(f"grid.{name}[{i}]", "kappa must be non-negative")
        object.__setattr__(self, "u_range", u)
        object.__setattr__(self, "kappa_range", kap)

    @classmethod
    def uniform(cls, ramps: int = 1, u=DEFAULT_U, kappa=DEFAULT_KAPPA, cap: int = GRID_CAP) -> "GridSpec":
        return cls((tuple(u),) * ramps, (tuple(kappa),) * ramps, cap)

    @property
    def ramps(self) -> int:
        return len(self.u_range)

    def u_values(self, i: int) -> np.ndarray:
        return _axis(*self.u_range[i])

    def kappa_values(self, i: int) -> np.ndarray:
        return _axis(*self.kappa_range[i])

    def ramp_size(self, i: int) -> int:
        return len(self.u_values(i)) * len(self.kappa_values(i))

    @property
    def size(self) -> int:
        return int(np.prod([self.ramp_size(i) for i in range(self.ramps)]))

    def for_ramp(self, i: int) -> "GridSpec":
        return GridSpec((self.u_range[i],), (self.kappa_range[i],), self.cap)

    def ramp_points(self, i: int) -> list[tuple[float, float]]:
        """(u, kappa) pairs of ramp i in lexicographic order."""
        return [(float(a), float(b)) for a in self.u_values(i) for b in self.kappa_values(i)]

    def points(self) -> list[tuple[tuple[float, ...], tuple[float, ...]]]:
        """All joint candidates as (u tuple, kappa tuple), lexicographic in (u, kappa)."""
        if self.size > self.cap:
            raise TooLarge(f"grid has {self.size} points, cap is {self.cap}")
        us = itertools.product(*[self.u_values(i) for i in range(self.ramps)])
        out = []
        for u in us:
            for kap in itertools.product(*[self.kappa_values(i) for i in range(self.ramps)]):
                out.append((tuple(float(x) for x in u), tuple(float(x) for x in kap)))
        return out


@dataclass
class DesignResult:
    policy: AffineControlPolicy
    objective: float
    feasible: bool
    mode: str = "drift"  # or "throughput"
    alpha_tilde: float | None = None
    ramps: tuple[int, ...] = ()  # designed ramps, 0-based cells
    report: DriftReport | None = None
    log: list[dict] | None = None
    stages: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["ramp", "u_veh_per_hr", "kappa_kmh"])
        for k in range(1, self.policy.K):
            wr.writerow([k + 1, repr(float(self.policy.u_full[k])), repr(float(self.policy.kappa_full[k]))])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["key", "value"])
        wr.writerow(["mode", self.mode])
        wr.writerow(["objective", repr(float(self.objective))])
        wr.writerow(["feasible", int(self.feasible)])
        if self.alpha_tilde is not None:
            wr.writerow(["alpha_tilde_1", repr(float(self.alpha_tilde))])
        for st in self.stages:
            wr.writerow([f"stage_ramp_{st['ramp'] + 1}_drift", repr(float(st["drift"]))])
        return buf.getvalue()

    def log_csv(self) -> str:
        """Per-candidate log: designed-ramp parameters, drift (blank if pruned), lower bound."""
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        names = [f"u_{k + 1}" for k in self.ramps] + [f"kappa_{k + 1}" for k in self.ramps]
        wr.writerow([*names, "mean_drift", "lower_bound"])
        for row in self.log or []:
            d = row["drift"]
            wr.writerow([*[repr(float(x)) for x in row["u"]], *[repr(float(x)) for x in row["kappa"]],
                         "" if d is None else repr(float(d)), repr(float(row["lower"]))])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# candidate evaluation
# ---------------------------------------------------------------------------

def _sample_points(obj: inner.NetFlowObjective, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Product grid of axis breakpoints and the midpoints between them."""
    free = np.where(hi - lo > 1e-12)[0]
    axes = []
    for j in free:
        bp = inner.axis_breakpoints(obj, int(j), lo[j], hi[j])
        axes.append(np.concatenate([bp, 0.5 * (bp[1:] + bp[:-1])]))
    size = int(np.prod([len(a) for a in axes])) if axes else 1
    base = np.broadcast_to(lo, (size, len(lo))).copy()
    if len(free):
        mesh = np.meshgrid(*axes, indexing="ij")
        base[:, free] = np.stack([m.ravel() for m in mesh], axis=1)
    return base


class _Evaluator:
    """Exact and lower-bound drift of one candidate policy on one highway."""

    def __init__(self, scheme: DesignScheme, cfg: HighwayConfig, markov: MarkovCapacityModel,
                 buffers: Sequence[int], fallback: inner.FallbackOptions | None = None):
        self.scheme = scheme
        self.cfg = cfg
        self.markov = markov
        self.buffers = tuple(buffers)
        self.fallback = fallback
        self.p = steady_state_probs(markov)

    def bounds(self, policy):
        try:
            return density_bounds(self.cfg, self.markov, policy)
        except NoRoot:
            return None

    def lower(self, policy) -> np.ndarray:
        """Per-buffer lower bounds on the mean of max net flows (objective sampled)."""
        b = self.bounds(policy)
        if b is None:
            return np.full(len(self.buffers), np.inf)
        sets = congestion_sets(self.scheme, b, self.cfg.K, self.buffers)
        out = np.empty(len(self.buffers))
        for i, k in enumerate(self.buffers):
            total = 0.0
            for s in range(self.markov.m):
                best = -np.inf
                for box in sets[k]:
                    obj = net_flow_objective(self.scheme, k, s, box.queued, policy, self.cfg, self.markov, b)
                    best = max(best, float(np.max(obj.value(_sample_points(obj, box.lo, box.hi)))))
                total += self.p[s] * best
            out[i] = total
        return out

    def exact(self, policy, order=None, stop_above: float = np.inf) -> tuple[float, bool]:
        """(max over buffers of the exact mean, complete).

        Buffers are visited in ``order``; once one exceeds ``stop_above`` the
        partial maximum is returned with ``complete = False``.
        """
        b = self.bounds(policy)
        if b is None:
            return np.inf, True
        out = -np.inf
        idx = range(len(self.buffers)) if order is None else order
        for i in idx:
            k = self.buffers[i]
            mean, _ = buffer_drift(self.scheme, k, policy, self.cfg, self.markov, b, self.p, self.fallback)
            out = max(out, mean)
            if out > stop_above:
                return out, False
        return out, True


def _map(fn: Callable, items: list, threads: int) -> list:
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _better(val: float, idx: int, best_val: float, best_idx: int) -> bool:
    if best_idx < 0:
        return True
    tol = TIE_RTOL * max(1.0, abs(best_val))
    if val < best_val - tol:
        return True
    return abs(val - best_val) <= tol and idx < best_idx


def _search(policies: list, ev: _Evaluator, threads: int = 1, prune: bool = True,
            feasibility_only: bool = False):
    """Minimize the exact drift over candidate policies.

    Returns (best index, best drift, per-candidate drifts (None if pruned),
    lower bounds).  With ``feasibility_only`` the search stops at the first
    candidate certified stable, which is then not necessarily the minimizer.
    """
    N = len(policies)
    drifts: list[float | None] = [None] * N
    if not prune:
        vals = [v for v, _ in _map(ev.exact, policies, threads)]
        best_i, best_v = -1, np.inf
        for i, v in enumerate(vals):
            drifts[i] = v
            if _better(v, i, best_v, best_i):
                best_i, best_v = i, v
            if feasibility_only and v < -STABLE_EPS:
                return i, v, drifts, np.array(vals)
        return best_i, best_v, drifts, np.array(vals)

    per_buffer = _map(ev.lower, policies, threads)
    lows = np.array([np.max(x) for x in per_buffer])
    order = np.lexsort((np.arange(N), lows))
    best_i, best_v = -1, np.inf

    def cutoff():
        if feasibility_only:
            return -STABLE_EPS
        return best_v + TIE_RTOL * max(1.0, abs(best_v)) if best_i >= 0 else np.inf

    def skip(i):
        return lows[i] > cutoff() or (feasibility_only and lows[i] >= -STABLE_EPS)

    # Chunks are evaluated in parallel with the cutoff from the chunk start,
    # then replayed in order against the running cutoff, so the result and
    # the log match a sequential search for any thread count.
    pos = 0
    while pos < N and not skip(int(order[pos])):
        chunk = [int(j) for j in order[pos:pos + max(1, threads)]]
        stop = cutoff()

        def run(j):
            return ev.exact(policies[j], np.argsort(-per_buffer[j], kind="stable"), stop)

        for j, (v, complete) in zip(chunk, _map(run, chunk, threads)):
            if skip(j):
                pos = N
                break
            if not complete or v > cutoff():
                continue
            drifts[j] = v
            if _better(v, j, best_v, best_i):
                best_i, best_v = j, v
            if feasibility_only and v < -STABLE_EPS:
                return j, v, drifts, lows
        else:
            pos += len(chunk)
    if best_i < 0:
        # nothing complete: every candidate was cut off (feasibility search)
        best_i = int(order[0])
        best_v = ev.exact(policies[best_i])[0]
        drifts[best_i] = best_v
    return best_i, best_v, drifts, lows


def _log_rows(points, drifts, lows) -> list[dict]:
    return [{"u": u, "kappa": k, "drift": d, "lower": lo} for (u, k), d, lo in zip(points, drifts, lows)]


def _build(base: AffineControlPolicy, ramps: Sequence[int], u, kap) -> AffineControlPolicy:
    pol = base
    for k, a, b in zip(ramps, u, kap):
        pol = pol.with_ramp(k, a, b)
    return pol


# ---------------------------------------------------------------------------
# localized design
# ---------------------------------------------------------------------------

def _check_grid(grid: GridSpec, ramps: int):
    if grid.ramps != ramps:
        raise ValidationError("grid", f"expected ranges for {ramps} ramp(s), got {grid.ramps}")


def design_localized(cfg: HighwayConfig, markov: MarkovCapacityModel, grid: GridSpec | None = None,
                     keep_log: bool = False, threads: int = 1, prune: bool = True) -> DesignResult:
    """Two-cell design: minimize the localized mean drift over the grid."""
    if cfg.K != 2:
        raise ValidationError("cfg", "the localized design needs exactly two cells")
    grid = grid or GridSpec.uniform(1)
    _check_grid(grid, 1)
    points = grid.points()
    base = AffineControlPolicy.uncontrolled(2)
    policies = [_build(base, (1,), u, k) for u, k in points]
    ev = _Evaluator(DesignScheme(LOCALIZED), cfg, markov, (0, 1))
    i, val, drifts, lows = _search(policies, ev, threads, prune)
    pol = policies[i]
    report = mean_drift(DesignScheme(LOCALIZED), pol, cfg, markov)
    return DesignResult(pol, val, bool(val < -STABLE_EPS), ramps=(1,), report=report,
                        log=_log_rows(points, drifts, lows) if keep_log else None)


def _stabilizable(cfg, markov, grid, threads, hint=None):
    """A grid policy certified stable for ``cfg``, or None."""
    ev = _Evaluator(DesignScheme(LOCALIZED), cfg, markov, (0, 1))
    if hint is not None and ev.exact(hint)[0] < -STABLE_EPS:
        return hint
    points = grid.points()
    base = AffineControlPolicy.uncontrolled(2)
    policies = [_build(base, (1,), u, k) for u, k in points]
    i, val, _, _ = _search(policies, ev, threads, True, feasibility_only=True)
    return policies[i] if val < -STABLE_EPS else None


def design_localized_throughput(cfg: HighwayConfig, markov: MarkovCapacityModel,
                                grid: GridSpec | None = None, tol: float = 1.0,
                                threads: int = 1) -> DesignResult:
    """Largest mainline demand alpha~_1 <= alpha_1 stabilizable on the grid (bisection).

    The witnessing policy is the drift-minimizing grid point at alpha~_1.
    """
    if cfg.K != 2:
        raise ValidationError("cfg", "the localized design needs exactly two cells")
    grid = grid or GridSpec.uniform(1)
    _check_grid(grid, 1)
    a_top = float(cfg.alpha[0])

    def at(a):
        return cfg.with_demands([a, cfg.alpha[1]])

    witness = _stabilizable(at(a_top), markov, grid, threads)
    if witness is not None:
        lo = a_top
    else:
        lo, hi = 0.0, a_top
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            w = _stabilizable(at(mid), markov, grid, threads, witness)
            if w is not None:
                lo, witness = mid, w
            else:
                hi = mid
            log.debug("throughput bisection: [%g, %g]", lo, hi)
    if witness is None:
        best = design_localized(at(lo), markov, grid, threads=threads)
        return DesignResult(best.policy, 0.0, False, mode="throughput", alpha_tilde=0.0,
                            ramps=(1,), report=best.report)
    best = design_localized(at(lo), markov, grid, threads=threads)
    return DesignResult(best.policy, lo, True, mode="throughput", alpha_tilde=lo, ramps=(1,),
                        report=best.report, stages=[{"ramp": 1, "drift": best.objective}])


def upstream_demand(cfg: HighwayConfig, first: int) -> float:
    """Demand entering cell ``first`` (its own buffer included) when every
    upstream buffer discharges at its demand and nothing is blocked."""
    return float(sum(gamma(i, first, cfg.beta) * cfg.alpha[i] for i in range(first + 1)))


def upstream_capacity(cfg: HighwayConfig, markov: MarkovCapacityModel, first: int) -> float:
    """Largest inflow into cell ``first`` from upstream: the upstream cell's
    top sending rate past its off-ramp plus the local buffer capacity."""
    if first == 0:
        return float(cfg.U[0])
    cap = cfg.beta[first - 1] * markov.F_max[first - 1] + cfg.U[first]
    return float(max(cap, upstream_demand(cfg, first)))


def section(cfg: HighwayConfig, markov: MarkovCapacityModel, policy: AffineControlPolicy,
            first: int, last: int):
    """Cells first..last as a standalone highway with the matching policy and chain."""
    if first == 0 and last == cfg.K - 1:
        return cfg, markov, policy
    sub = cfg.subsection(first, last, upstream_demand(cfg, first), upstream_capacity(cfg, markov, first))
    cells = list(range(first, last + 1))
    pol = AffineControlPolicy(tuple(policy.u_full[first + 1:last + 1]), tuple(policy.kappa_full[first + 1:last + 1]))
    return sub, markov.restrict(cells), pol


def _thr_tol(sub: HighwayConfig) -> float:
    # bisection resolution for section inflows: 0.5% of the inflow, at least 1 veh/hr
    return max(1.0, 0.005 * float(sub.alpha[0]))


def design_localized_sections(cfg: HighwayConfig, markov: MarkovCapacityModel, grid: GridSpec,
                              ramps: Sequence[int] | None = None, threads: int = 1,
                              throughput: bool = False) -> DesignResult:
    """Localized design of each ramp k on the two-cell section (k-1, k).

    Ramps whose section has no stable grid point keep their drift-minimizing
    point and mark the result infeasible.  With ``throughput`` such a ramp is
    redesigned in throughput mode instead (largest stabilizable section
    inflow), which leaves the result feasible at the reduced inflow.
    """
    ramps = tuple(range(1, cfg.K)) if ramps is None else tuple(ramps)
    _check_grid(grid, len(ramps))
    pol = AffineControlPolicy.uncontrolled(cfg.K)
    stages = []
    ok = True
    worst = -np.inf
    for i, k in enumerate(ramps):
        sub, mk, _ = section(cfg, markov, pol, k - 1, k)
        res = design_localized(sub, mk, grid.for_ramp(i), threads=threads)
        st = {"ramp": k, "drift": res.objective, "feasible": res.feasible}
        if not res.feasible and throughput:
            thr = design_localized_throughput(sub, mk, grid.for_ramp(i), tol=_thr_tol(sub), threads=threads)
            if thr.feasible:
                res = thr
                st["alpha_tilde"] = thr.alpha_tilde
        pol = pol.with_ramp(k, res.policy.u_full[1], res.policy.kappa_full[1])
        stages.append(st)
        ok &= st["feasible"]
        worst = max(worst, st["drift"])
    return DesignResult(pol, worst, ok, ramps=ramps, stages=stages)


# ---------------------------------------------------------------------------
# coordinated designs
# ---------------------------------------------------------------------------

def design_full(cfg: HighwayConfig, markov: MarkovCapacityModel, grid: GridSpec | None = None,
                keep_log: bool = False, threads: int = 1, prune: bool = True,
                scheme: DesignScheme | None = None) -> DesignResult:
    """Joint grid search over all ramps minimizing the fully coordinated mean drift."""
    if cfg.K > FULL_MAX_K:
        raise TooLarge(f"the fully coordinated design is limited to K <= {FULL_MAX_K}, got K = {cfg.K}")
    if cfg.K < 2:
        raise ValidationError("cfg", "no ramps to design")
    ramps = tuple(range(1, cfg.K))
    grid = grid or GridSpec.uniform(len(ramps))
    _check_grid(grid, len(ramps))
    scheme = scheme or DesignScheme(FULL)
    points = grid.points()
    base = AffineControlPolicy.uncontrolled(cfg.K)
    policies = [_build(base, ramps, u, k) for u, k in points]
    ev = _Evaluator(scheme, cfg, markov, range(cfg.K))
    i, val, drifts, lows = _search(policies, ev, threads, prune)
    pol = policies[i]
    return DesignResult(pol, val, bool(val < -STABLE_EPS), ramps=ramps,
                        report=mean_drift(scheme, pol, cfg, markov),
                        log=_log_rows(points, drifts, lows) if keep_log else None)


def _stage_throughput(scheme, sub, mk, sub_pols, kk, fallback, threads, prune):
    """(candidate index, inflow) maximizing the section inflow that stage
    buffer ``kk`` can be certified stable at, or None if even zero inflow fails."""

    def at(a):
        return _Evaluator(scheme, sub.with_demands([a, *sub.alpha[1:]]), mk, (kk,), fallback)

    def feasible(a):
        i, val, _, _ = _search(sub_pols, at(a), threads, prune, feasibility_only=True)
        return val < -STABLE_EPS

    lo, hi = 0.0, float(sub.alpha[0])
    if not feasible(lo):
        return None
    tol = _thr_tol(sub)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    i, _, _, _ = _search(sub_pols, at(lo), threads, prune)
    return i, lo


def _window(cfg: HighwayConfig, k: int, width: int | None) -> tuple[int, int]:
    first = max(k - 1, 0)
    last = cfg.K - 1 if width is None else min(cfg.K - 1, k + width)
    return first, last


def design_partial(cfg: HighwayConfig, markov: MarkovCapacityModel, grid: GridSpec | None = None,
                   scheme: DesignScheme | None = None, ramps: Sequence[int] | None = None,
                   window: int | None = None, strict: bool = True, threads: int = 1,
                   prune: bool = True, fallback: inner.FallbackOptions | None = None,
                   throughput: bool = False) -> DesignResult:
    """Sequential partially coordinated design, downstream ramp first.

    Stage k searches (u_k, kappa_k) with the ramps downstream of k fixed at
    their designed values and the ramps upstream uncontrolled, and minimizes
    the buffer-k mean drift.  ``window`` truncates each stage to cells
    k-1..k+window (the section's last cell discharging freely); ``None`` uses
    the whole highway.  With ``strict`` an infeasible stage raises
    SubproblemInfeasible, otherwise its best point is kept, or with
    ``throughput`` the stage is redesigned at the largest section inflow for
    which it is stabilizable (the stage record then carries ``alpha_tilde``).
    """
    if cfg.K < 2:
        raise ValidationError("cfg", "no ramps to design")
    scheme = scheme or DesignScheme(PARTIAL)
    if scheme.variant != PARTIAL:
        raise ValidationError("scheme", "design_partial needs the partial scheme")
    ramps = tuple(range(1, cfg.K)) if ramps is None else tuple(sorted(ramps))
    grid = grid or GridSpec.uniform(len(ramps))
    _check_grid(grid, len(ramps))
    pol = AffineControlPolicy.uncontrolled(cfg.K)
    stages = []
    logs = []
    for gi in range(len(ramps) - 1, -1, -1):
        k = ramps[gi]
        first, last = _window(cfg, k, window)
        points = grid.for_ramp(gi).points()
        full_pols = [pol.with_ramp(k, u[0], kap[0]) for u, kap in points]
        sub, mk, _ = section(cfg, markov, pol, first, last)
        sub_pols = [section(cfg, markov, p_, first, last)[2] for p_ in full_pols]
        ev = _Evaluator(scheme, sub, mk, (k - first,), fallback)
        i, val, drifts, lows = _search(sub_pols, ev, threads, prune)
        st = {"ramp": k, "drift": val, "feasible": bool(val < -STABLE_EPS)}
        logs.append(_log_rows(points, drifts, lows))
        if not val < -STABLE_EPS and strict:
            raise SubproblemInfeasible(k, val, full_pols[i])
        if not val < -STABLE_EPS and throughput:
            thr = _stage_throughput(scheme, sub, mk, sub_pols, k - first, fallback, threads, prune)
            if thr is not None:
                i, st["alpha_tilde"] = thr
        st["u"], st["kappa"] = points[i][0][0], points[i][1][0]
        stages.append(st)
        pol = full_pols[i]
    # final certificate, including the mainline buffer
    means = np.full(cfg.K, np.nan)
    for k in range(cfg.K):
        first, last = _window(cfg, k, window)
        sub, mk, sp = section(cfg, markov, pol, first, last)
        kk = k - first
        try:
            b = density_bounds(sub, mk, sp)
        except NoRoot:
            means[k] = np.inf
            continue
        means[k], _ = buffer_drift(scheme, kk, sp, sub, mk, b, steady_state_probs(mk), fallback)
    report = None
    if window is None:
        report = mean_drift(scheme, pol, cfg, markov, fallback=fallback)
    objective = float(np.max(means))
    stages.reverse()
    for st in stages:
        st["final_drift"] = float(means[st["ramp"]])
    stages.insert(0, {"ramp": 0, "drift": float(means[0]), "feasible": bool(means[0] < -STABLE_EPS)})
    return DesignResult(pol, objective, bool(objective < -STABLE_EPS), ramps=ramps, report=report,
                        stages=stages, log=[row for lg in logs for row in lg])


def drift_grid(cfg: HighwayConfig, markov: MarkovCapacityModel, grid: GridSpec,
               scheme: DesignScheme | None = None, ramps: Sequence[int] | None = None,
               threads: int = 1) -> DesignResult:
    """Exact mean drift at every grid point (no pruning), kept in the log."""
    ramps = tuple(range(1, cfg.K)) if ramps is None else tuple(ramps)
    _check_grid(grid, len(ramps))
    scheme = scheme or DesignScheme(LOCALIZED if cfg.K == 2 else FULL)
    scheme.check(cfg.K)
    points = grid.points()
    base = AffineControlPolicy.uncontrolled(cfg.K)
    policies = [_build(base, ramps, u, k) for u, k in points]
    ev = _Evaluator(scheme, cfg, markov, range(cfg.K))
    i, val, drifts, lows = _search(policies, ev, threads, prune=False)
    return DesignResult(policies[i], val, bool(val < -STABLE_EPS), ramps=ramps,
                        log=_log_rows(points, drifts, lows))


def drift_surface_csv(result: DesignResult) -> str:
    """Long-format u x kappa drift surface from a single-ramp design log."""
    if not result.log:
        raise ValidationError("result", "design was run without a candidate log")
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["u_veh_per_hr", "kappa_kmh", "mean_drift"])
    for row in result.log:
        d = row["drift"]
        wr.writerow([repr(float(row["u"][0])), repr(float(row["kappa"][0])), "" if d is None else repr(float(d))])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# strategy comparison
# ---------------------------------------------------------------------------

def _hour_step(sim: SimConfig, hour: float) -> int:
    return int(round((hour - sim.start_hour) * sim.steps_per_hour))


def metering_schedule(control, sim: SimConfig, window: tuple[float, float] | None):
    """Wrap a controller so that it only acts within the clock-hour ``window``."""
    if window is None or control is None:
        return control
    if isinstance(control, list):
        raise ValidationError("control", "a schedule cannot be wrapped in a metering window")
    T = sim.horizon_steps
    a = min(max(_hour_step(sim, window[0]), 0), T)
    b = min(max(_hour_step(sim, window[1]), 0), T)
    items = [(0, None)]
    if a < b:
        items = [(0, None), (a, control)] if a > 0 else [(0, control)]
        if b < T:
            items.append((b, None))
    return items


def demand_at(cfg: HighwayConfig, sim: SimConfig, step: int) -> np.ndarray:
    alpha = cfg.alpha.copy()
    for s, a in sim.demand_schedule:
        if s <= step:
            alpha = np.array(a, dtype=float)
    return alpha


def hourly_designs(cfg: HighwayConfig, sim: SimConfig, window: tuple[float, float] | None,
                   design: Callable[[HighwayConfig], DesignResult]):
    """Re-design at every demand change inside the metering window.

    Returns (control schedule, [(start step, DesignResult), ...]).  Identical
    demand vectors share one design.
    """
    T = sim.horizon_steps
    a, b = (0, T) if window is None else (_hour_step(sim, window[0]), _hour_step(sim, window[1]))
    a, b = min(max(a, 0), T), min(max(b, 0), T)
    starts = sorted({a} | {s for s, _ in sim.demand_schedule if a < s < b})
    cache: dict[bytes, DesignResult] = {}
    items: list = [] if a == 0 else [(0, None)]
    results = []
    for s in starts if a < b else []:
        alpha = demand_at(cfg, sim, s)
        key = alpha.tobytes()
        if key not in cache:
            cache[key] = design(cfg.with_demands(alpha))
        results.append((s, cache[key]))
        items.append((s, cache[key].policy))
    if b < T or not items:
        items.append((b, None))
    return items, results


@dataclass
class ComparisonTable:
    """Per-strategy, per-replication, per-hour queue and VHT."""

    names: tuple[str, ...]
    hour_starts: np.ndarray  # clock hour of each reported bin
    queue: np.ndarray  # (strategies, replications, hours), time-averaged total queue, veh
    vht: np.ndarray  # (strategies, replications, hours), veh.hr
    seed: int
    replications: int

    def _metric(self, metric: str) -> np.ndarray:
        if metric not in ("queue", "vht"):
            raise ValidationError("metric", f"unknown metric {metric!r}")
        return self.queue if metric == "queue" else self.vht

    def totals(self, metric: str = "vht") -> np.ndarray:
        """(strategies, replications): hourly mean of the queue, sum of VHT."""
        x = self._metric(metric)
        if x.shape[2] == 0:
            return np.zeros(x.shape[:2])
        return x.mean(axis=2) if metric == "queue" else x.sum(axis=2)

    def mean(self, metric: str = "vht") -> np.ndarray:
        return self._metric(metric).mean(axis=1)

    def se(self, metric: str = "vht") -> np.ndarray:
        x = self._metric(metric)
        if self.replications < 2:
            return np.zeros((x.shape[0], x.shape[2]))
        return x.std(axis=1, ddof=1) / np.sqrt(self.replications)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValidationError("strategy", f"no strategy named {name!r}") from None

    def paired_test(self, a: str, b: str, metric: str = "vht") -> float:
        """One-sided paired t-test p-value for "total of a < total of b"."""
        t = self.totals(metric)
        x, y = t[self.index(a)], t[self.index(b)]
        d = x - y
        if len(d) < 2 or np.all(d == d[0]):
            return 0.0 if np.all(d < 0) else 1.0
        return float(ttest_rel(x, y, alternative="less").pvalue)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        labels = [f"{int(h) % 24:02d}:{int(round((h % 1) * 60)):02d}" for h in self.hour_starts]
        wr.writerow(["strategy", "metric", "stat", *labels, "total"])
        n = max(self.replications, 1)
        for metric in ("queue", "vht"):
            tot = self.totals(metric)
            m, s = self.mean(metric), self.se(metric)
            for i, name in enumerate(self.names):
                tse = tot[i].std(ddof=1) / np.sqrt(n) if self.replications > 1 else 0.0
                wr.writerow([name, metric, "mean", *[repr(float(x)) for x in m[i]], repr(float(tot[i].mean()))])
                wr.writerow([name, metric, "se", *[repr(float(x)) for x in s[i]], repr(float(tse))])
        return buf.getvalue()


def compare_strategies(cfg: HighwayConfig, markov: MarkovCapacityModel, sim: SimConfig,
                       strategies: Sequence[tuple[str, object]], replications: int = 10,
                       report_window: tuple[float, float] | None = None) -> ComparisonTable:
    """Paired Monte-Carlo comparison of control strategies.

    Every strategy sees the same demand schedule and, in replication r, the
    same mode sample path (seed ``sim.seed``, stream r).  Controls are
    anything the simulator accepts, including start-step schedules.  Hourly
    bins starting inside ``report_window`` (clock hours) are reported; all
    bins when it is None.
    """
    if replications < 1:
        raise ValidationError("replications", "must be at least 1")
    names = tuple(n for n, _ in strategies)
    if len(set(names)) != len(names):
        raise ValidationError("strategies", "strategy names must be distinct")
    sim.check(cfg, markov)
    init = sim.initial(cfg)
    S = len(strategies)
    rows_q, rows_v, starts = [], [], None
    for r in range(replications):
        modes = mode_path(markov, init.mode, sim.dt_hr, sim.horizon_steps, make_rng(sim.seed, r))
        q_r, v_r = [], []
        for _, control in strategies:
            m = run_metrics(control, cfg, markov, sim, r, modes=modes)
            q_r.append(m.hourly_queue)
            v_r.append(m.hourly_vht)
            starts = m.hour_starts
        rows_q.append(q_r)
        rows_v.append(v_r)
    q = np.array(rows_q, dtype=float).transpose(1, 0, 2)
    v = np.array(rows_v, dtype=float).transpose(1, 0, 2)
    if report_window is not None and starts is not None:
        keep = (starts >= report_window[0] - 1e-9) & (starts < report_window[1] - 1e-9)
        q, v, starts = q[:, :, keep], v[:, :, keep], starts[keep]
    if starts is None:
        starts = np.zeros(0)
    return ComparisonTable(names, np.asarray(starts), q.reshape(S, replications, -1),
                           v.reshape(S, replications, -1), sim.seed, replications)
