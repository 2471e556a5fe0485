"""Discrete-time Monte-Carlo simulation of the controlled SS-CTM.

Explicit Euler with projection: flows are evaluated at the start of a step,
queues are clamped at 0 and densities to [0, n_jam].  The mode chain moves at
most once per step, with probability lambda_{s,s'} dt.

Mode paths are drawn up front from numpy's Philox4x64 generator keyed by
``SeedSequence([seed, replication])``, so every strategy simulated with the
same seed sees the same capacity sample path (common random numbers).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence, Union

import numba
import numpy as np

from .baselines import BaselineSpec
from .errors import ValidationError
from .model import AffineControlPolicy, HighwayConfig, HybridState, MarkovCapacityModel

RNG_ALGORITHM = "numpy.random.Philox (Philox4x64-10), key SeedSequence([seed, replication])"

SEG_OFF, SEG_AFFINE, SEG_FEEDBACK = 0, 1, 2

Controller = Union[AffineControlPolicy, BaselineSpec, None]


@dataclass(frozen=True)
class SimConfig:
    dt_hr: float = 10.0 / 3600.0
    horizon_steps: int = 100_000
    seed: int = 0
    queue_cap_veh_per_lane: float | None = None
    lanes_per_ramp: tuple[int, ...] | None = None
    initial_state: HybridState | None = None
    demand_schedule: tuple[tuple[int, tuple[float, ...]], ...] = ()
    start_hour: float = 0.0  # clock time of step 0, for labels only

    def __post_init__(self):
        if not (self.dt_hr > 0 and np.isfinite(self.dt_hr)):
            raise ValidationError("sim.dt", "time step must be positive")
        if int(self.horizon_steps) != self.horizon_steps or self.horizon_steps < 0:
            raise ValidationError("sim.horizon_steps", "must be a non-negative integer")
        object.__setattr__(self, "horizon_steps", int(self.horizon_steps))
        object.__setattr__(self, "seed", int(self.seed))
        if self.queue_cap_veh_per_lane is not None and not self.queue_cap_veh_per_lane > 0:
            raise ValidationError("sim.queue_cap", "must be positive")
        if self.lanes_per_ramp is not None:
            lanes = tuple(int(x) for x in self.lanes_per_ramp)
            if any(x <= 0 for x in lanes):
                raise ValidationError("sim.lanes_per_ramp", "lane counts must be positive")
            object.__setattr__(self, "lanes_per_ramp", lanes)
        sched = tuple((int(s), tuple(float(x) for x in a)) for s, a in self.demand_schedule)
        starts = [s for s, _ in sched]
        if starts != sorted(starts) or len(set(starts)) != len(starts) or any(s < 0 for s in starts):
            raise ValidationError("sim.demand_schedule", "start steps must be distinct, sorted and >= 0")
        object.__setattr__(self, "demand_schedule", sched)

    @property
    def steps_per_hour(self) -> int:
        return max(1, int(round(1.0 / self.dt_hr)))

    def check(self, cfg: HighwayConfig, markov: MarkovCapacityModel) -> None:
        out = markov.rates.sum(axis=1).max() if markov.m > 1 else 0.0
        if not self.dt_hr * out < 1:
            raise ValidationError("sim.dt", f"dt * max exit rate = {self.dt_hr * out:.4g} must be below 1")
        for s, a in self.demand_schedule:
            if len(a) != cfg.K:
                raise ValidationError("sim.demand_schedule", f"demand vector at step {s} needs {cfg.K} entries")
            if any(x < 0 or x > u for x, u in zip(a, cfg.U)):
                raise ValidationError("sim.demand_schedule", f"demands at step {s} must lie in [0, U]")
        if self.lanes_per_ramp is not None and len(self.lanes_per_ramp) != cfg.K:
            raise ValidationError("sim.lanes_per_ramp", f"needs {cfg.K} entries")
        if self.initial_state is not None:
            self.initial_state.check_bounds(cfg, markov)

    def initial(self, cfg: HighwayConfig) -> HybridState:
        if self.initial_state is not None:
            return self.initial_state
        return HybridState(0, np.zeros(cfg.K), np.zeros(cfg.K))


@dataclass
class Trajectory:
    """States at steps 0..T and the flows applied during steps 0..T-1."""

    mode: np.ndarray  # (T+1,)
    q: np.ndarray  # (T+1, K)
    n: np.ndarray  # (T+1, K)
    r: np.ndarray  # (T, K)
    f: np.ndarray  # (T, K)
    dt_hr: float
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.mode) - 1

    def state(self, t: int) -> HybridState:
        return HybridState(int(self.mode[t]), self.q[t].copy(), self.n[t].copy())

    def to_csv(self) -> str:
        K = self.q.shape[1]
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["step", "mode", *[f"q_{j + 1}" for j in range(K)], *[f"n_{j + 1}" for j in range(K)]])
        for t in range(1, len(self.mode)):
            wr.writerow([t, int(self.mode[t]) + 1, *[repr(float(x)) for x in self.q[t]],
                         *[repr(float(x)) for x in self.n[t]]])
        return buf.getvalue()


@dataclass
class Metrics:
    time_avg_queue_veh: float
    vht_veh_hr: float
    hourly_queue: np.ndarray
    hourly_vht: np.ndarray
    hour_starts: np.ndarray  # clock hour of each bin

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["hour_start", "time_avg_queue_veh", "vht_veh_hr"])
        for h, a, b in zip(self.hour_starts, self.hourly_queue, self.hourly_vht):
            wr.writerow([repr(float(h)), repr(float(a)), repr(float(b))])
        wr.writerow(["total", repr(float(self.time_avg_queue_veh)), repr(float(self.vht_veh_hr))])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# random mode paths
# ---------------------------------------------------------------------------

def make_rng(seed: int, replication: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), int(replication)])))


@numba.njit(cache=True)
def _mode_path(s0, rates, dt, uniforms):
    m = rates.shape[0]
    T = uniforms.shape[0]
    out = np.empty(T + 1, dtype=np.int64)
    out[0] = s0
    s = s0
    for t in range(T):
        x = uniforms[t]
        acc = 0.0
        for s2 in range(m):
            acc += rates[s, s2] * dt
            if x < acc:
                s = s2
                break
        out[t + 1] = s
    return out


def mode_path(markov: MarkovCapacityModel, s0: int, dt_hr: float, steps: int,
              rng: np.random.Generator) -> np.ndarray:
    """Modes at steps 0..steps.  One uniform per step drives the transition."""
    u = rng.random(steps)
    return _mode_path(int(s0), np.ascontiguousarray(markov.rates, dtype=np.float64),
                      float(dt_hr), u)


# ---------------------------------------------------------------------------
# kernel
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _kernel(q0, n0, modes, v, w, jam, beta, length, U, F,
            seg_start, seg_alpha, pol_start, pol_kind, pol_u, pol_kappa,
            KP, KI, ncrit, upd, mu0, capveh, dt, bin_steps,
            record, rec_q, rec_n, rec_r, rec_f, box_lo, box_hi,
            bin_q, bin_veh):
    """Run len(modes)-1 steps.  Returns the largest normalized exit from the
    box selected by the queue pattern (0 when no boxes are given)."""
    K = q0.shape[0]
    T = modes.shape[0] - 1
    q = q0.copy()
    n = n0.copy()
    r = np.zeros(K)
    f = np.zeros(K)
    mu = mu0.copy()
    n_prev = n0.copy()
    nbox = box_lo.shape[0]
    worst = 0.0
    si = 0
    pi = 0
    if record:
        rec_q[0, :] = q
        rec_n[0, :] = n
    for t in range(T):
        while si + 1 < seg_start.shape[0] and t >= seg_start[si + 1]:
            si += 1
        while pi + 1 < pol_start.shape[0] and t >= pol_start[pi + 1]:
            pi += 1
        kind = pol_kind[pi]
        if kind == 2 and t % upd == 0:
            for i in range(K - 1):
                acc = mu[i]
                for j in range(K):
                    acc -= KP[i, j] * (n[j] - n_prev[j]) + KI[i, j] * (n[j] - ncrit[j])
                if acc < 0.0:
                    acc = 0.0
                if acc > U[i + 1]:
                    acc = U[i + 1]
                mu[i] = acc
            for j in range(K):
                n_prev[j] = n[j]
        s = modes[t]
        # buffer flows
        for k in range(K):
            a = seg_alpha[si, k]
            cap = a if q[k] <= 0.0 else U[k]
            recv = w[k] * (jam[k] - n[k])
            x = cap if cap < recv else recv
            if k > 0 and q[k] <= capveh[k]:
                if kind == 1:
                    uu = pol_u[pi, k]
                    if uu < np.inf:
                        m_ = uu - pol_kappa[pi, k] * n[k]
                        if m_ < 0.0:
                            m_ = 0.0
                        if m_ < x:
                            x = m_
                elif kind == 2:
                    if mu[k - 1] < x:
                        x = mu[k - 1]
            r[k] = x if x > 0.0 else 0.0
        # cell outflows
        for k in range(K):
            x = v[k] * n[k]
            if F[s, k] < x:
                x = F[s, k]
            if k < K - 1:
                room = w[k + 1] * (jam[k + 1] - n[k + 1]) - r[k + 1]
                if room < 0.0:
                    room = 0.0
                room = room / beta[k]
                if room < x:
                    x = room
            f[k] = x if x > 0.0 else 0.0
        # Euler step with projection
        sq = 0.0
        sv = 0.0
        for k in range(K):
            a = seg_alpha[si, k]
            inflow = r[k]
            if k > 0:
                inflow += beta[k - 1] * f[k - 1]
            nn = n[k] + dt * (inflow - f[k]) / length[k]
            if nn < 0.0:
                nn = 0.0
            if nn > jam[k]:
                nn = jam[k]
            qq = q[k] + dt * (a - r[k])
            if qq < 0.0:
                qq = 0.0
            n[k] = nn
            q[k] = qq
            sq += qq
            sv += length[k] * nn
        b = t // bin_steps
        bin_q[b] += sq
        bin_veh[b] += sv
        if record:
            rec_q[t + 1, :] = q
            rec_n[t + 1, :] = n
            rec_r[t, :] = r
            rec_f[t, :] = f
        if nbox > 0:
            idx = 0
            for k in range(K):
                if q[k] > 0.0:
                    idx |= 1 << k
            for k in range(K):
                e = (box_lo[idx, k] - n[k]) / jam[k]
                e2 = (n[k] - box_hi[idx, k]) / jam[k]
                if e2 > e:
                    e = e2
                if e > worst:
                    worst = e
    return worst


# ---------------------------------------------------------------------------
# python front end
# ---------------------------------------------------------------------------

def _schedule(cfg: HighwayConfig, sim: SimConfig):
    starts = [0]
    alphas = [cfg.alpha.copy()]
    for s, a in sim.demand_schedule:
        if s == 0:
            alphas[0] = np.array(a)
        else:
            starts.append(s)
            alphas.append(np.array(a))
    return np.array(starts, dtype=np.int64), np.array(alphas, dtype=np.float64)


def _controls(control, K: int):
    """Normalize a controller or a [(start_step, controller), ...] schedule."""
    if isinstance(control, (list, tuple)) and control and isinstance(control[0], tuple):
        items = list(control)
    else:
        items = [(0, control)]
    if items[0][0] != 0:
        items.insert(0, (0, None))
    fb = None
    starts, kinds, us, ks = [], [], [], []
    for start, c in items:
        starts.append(int(start))
        u = np.full(K, np.inf)
        kap = np.zeros(K)
        if c is None:
            kinds.append(SEG_OFF)
        elif isinstance(c, AffineControlPolicy):
            if c.K != K:
                raise ValidationError("policy", f"policy is for {c.K} cells, highway has {K}")
            kinds.append(SEG_AFFINE)
            u, kap = c.u_full.copy(), c.kappa_full.copy()
        elif isinstance(c, BaselineSpec):
            if c.K != K:
                raise ValidationError("baseline", f"baseline is for {c.K} cells, highway has {K}")
            if fb is not None and fb is not c:
                raise ValidationError("baseline", "a schedule may use only one feedback controller")
            fb = c
            kinds.append(SEG_FEEDBACK)
        else:
            raise ValidationError("policy", f"unsupported controller {type(c).__name__}")
        us.append(u)
        ks.append(kap)
    if sorted(starts) != starts or len(set(starts)) != len(starts):
        raise ValidationError("control schedule", "start steps must be distinct and sorted")
    return (np.array(starts, dtype=np.int64), np.array(kinds, dtype=np.int64),
            np.array(us, dtype=np.float64), np.array(ks, dtype=np.float64), fb)


def _run(control, cfg: HighwayConfig, markov: MarkovCapacityModel, sim: SimConfig, modes: np.ndarray,
         record: bool, boxes=None, bin_steps: int | None = None, initial: HybridState | None = None):
    K = cfg.K
    T = len(modes) - 1
    init = initial if initial is not None else sim.initial(cfg)
    seg_start, seg_alpha = _schedule(cfg, sim)
    pol_start, pol_kind, pol_u, pol_k, fb = _controls(control, K)
    if fb is not None:
        KP, KI = fb.gain_matrices()
        ncrit = fb.n_crit.astype(np.float64)
        upd = fb.update_steps(sim.dt_hr)
    else:
        KP = KI = np.zeros((K - 1, K))
        ncrit = np.zeros(K)
        upd = 1
    mu0 = cfg.U[1:].astype(np.float64).copy()
    capveh = np.full(K, np.inf)
    if sim.queue_cap_veh_per_lane is not None:
        lanes = np.ones(K) if sim.lanes_per_ramp is None else np.array(sim.lanes_per_ramp, dtype=float)
        capveh = sim.queue_cap_veh_per_lane * lanes
    bs = bin_steps or sim.steps_per_hour
    nb = max(1, -(-T // bs))
    bin_q = np.zeros(nb)
    bin_veh = np.zeros(nb)
    if record:
        rq, rn = np.empty((T + 1, K)), np.empty((T + 1, K))
        rr, rf = np.empty((T, K)), np.empty((T, K))
    else:
        rq = rn = rr = rf = np.empty((1, K))
    if boxes is None:
        blo = bhi = np.empty((0, K))
    else:
        blo, bhi = boxes
    worst = _kernel(init.q.astype(np.float64), init.n.astype(np.float64), modes.astype(np.int64),
                    cfg.v, cfg.w, cfg.n_jam, cfg.beta, cfg.length, cfg.U,
                    np.ascontiguousarray(markov.capacities, dtype=np.float64),
                    seg_start, seg_alpha, pol_start, pol_kind, pol_u, pol_k,
                    np.ascontiguousarray(KP, dtype=np.float64), np.ascontiguousarray(KI, dtype=np.float64),
                    ncrit, int(upd), mu0, capveh, float(sim.dt_hr), int(bs),
                    bool(record), rq, rn, rr, rf, np.ascontiguousarray(blo, dtype=np.float64),
                    np.ascontiguousarray(bhi, dtype=np.float64), bin_q, bin_veh)
    return (rq, rn, rr, rf) if record else None, bin_q, bin_veh, worst


def _modes_for(markov, sim, s0, replication=0, steps=None):
    T = sim.horizon_steps if steps is None else steps
    return mode_path(markov, s0, sim.dt_hr, T, make_rng(sim.seed, replication))


def simulate(policy: Controller, cfg: HighwayConfig, markov: MarkovCapacityModel, sim: SimConfig,
             replication: int = 0) -> Trajectory:
    """Full trajectory of one replication; deterministic in (inputs, seed, replication)."""
    sim.check(cfg, markov)
    init = sim.initial(cfg)
    modes = _modes_for(markov, sim, init.mode, replication)
    rec, _, _, _ = _run(policy, cfg, markov, sim, modes, True)
    rq, rn, rr, rf = rec
    return Trajectory(modes, rq, rn, rr, rf, sim.dt_hr,
                      {"seed": sim.seed, "replication": replication, "rng": RNG_ALGORITHM})


def step(state: HybridState, policy: AffineControlPolicy | None, cfg: HighwayConfig,
         markov: MarkovCapacityModel, sim: SimConfig, rng: np.random.Generator) -> HybridState:
    """One Euler step followed by one mode draw."""
    modes = np.array([state.mode, state.mode], dtype=np.int64)
    rec, _, _, _ = _run(policy, cfg, markov, sim, modes, True, initial=state)
    nxt = int(_mode_path(int(state.mode), np.ascontiguousarray(markov.rates, dtype=np.float64),
                         float(sim.dt_hr), rng.random(1))[1])
    return HybridState(nxt, rec[0][1].copy(), rec[1][1].copy())


def time_avg_queue(traj: Trajectory) -> float:
    """Mean over steps 1..T of the total queue (the initial state when T = 0)."""
    if len(traj) == 0:
        return float(traj.q[0].sum())
    return float(traj.q[1:].sum(axis=1).mean())


def vht(traj: Trajectory, cfg: HighwayConfig, dt_hr: float | None = None) -> float:
    """dt * sum over steps 1..T of (sum_k l_k n_k + sum_k q_k)."""
    dt = traj.dt_hr if dt_hr is None else dt_hr
    return float(dt * (np.sum(traj.n[1:] @ cfg.length) + np.sum(traj.q[1:])))


def density_map(traj: Trajectory, cfg: HighwayConfig, bin_minutes: float) -> np.ndarray:
    """Mean density per (cell, time bin) over steps 1..T (step 0 alone when T = 0)."""
    T = len(traj)
    n = traj.n[1:] if T else traj.n[:1]
    steps = bin_minutes / 60.0 / traj.dt_hr
    bs = int(round(steps))
    if bs < 1 or abs(steps - bs) > 1e-9 or len(n) % bs:
        raise ValidationError("bin_minutes", "bin length must be a whole number of steps dividing the horizon")
    return n.reshape(len(n) // bs, bs, cfg.K).mean(axis=1).T


def density_map_csv(grid: np.ndarray, bin_minutes: float, start_hour: float = 0.0) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["cell", *[repr(float(start_hour + i * bin_minutes / 60.0)) for i in range(grid.shape[1])]])
    for k, row in enumerate(grid):
        wr.writerow([k + 1, *[repr(float(x)) for x in row]])
    return buf.getvalue()


def _metrics(bin_q, bin_veh, T, sim: SimConfig, bin_steps: int) -> Metrics:
    if T == 0:
        return Metrics(0.0, 0.0, np.zeros(0), np.zeros(0), np.zeros(0))
    counts = np.full(len(bin_q), bin_steps, dtype=float)
    counts[-1] = T - bin_steps * (len(bin_q) - 1)
    hq = bin_q / counts
    hv = sim.dt_hr * (bin_veh + bin_q)
    starts = sim.start_hour + np.arange(len(bin_q)) * bin_steps * sim.dt_hr
    return Metrics(float(bin_q.sum() / T), float(hv.sum()), hq, hv, starts)


def metrics(traj: Trajectory, cfg: HighwayConfig, sim: SimConfig) -> Metrics:
    T = len(traj)
    bs = sim.steps_per_hour
    nb = max(1, -(-T // bs))
    bq = np.zeros(nb)
    bv = np.zeros(nb)
    if T:
        idx = np.arange(T) // bs
        np.add.at(bq, idx, traj.q[1:].sum(axis=1))
        np.add.at(bv, idx, traj.n[1:] @ cfg.length)
    return _metrics(bq, bv, T, sim, bs)


def run_metrics(policy, cfg: HighwayConfig, markov: MarkovCapacityModel, sim: SimConfig,
                replication: int = 0, modes: np.ndarray | None = None) -> Metrics:
    """Metrics of one replication without storing the trajectory."""
    sim.check(cfg, markov)
    init = sim.initial(cfg)
    if modes is None:
        modes = _modes_for(markov, sim, init.mode, replication)
    _, bq, bv, _ = _run(policy, cfg, markov, sim, modes, False)
    return _metrics(bq, bv, len(modes) - 1, sim, sim.steps_per_hour)


def mean_queue_over_policies(policies: Sequence, cfg: HighwayConfig, markov: MarkovCapacityModel,
                             sim: SimConfig, replications: int = 1) -> np.ndarray:
    """Q-hat averaged over replications for each policy, with shared mode paths."""
    sim.check(cfg, markov)
    init = sim.initial(cfg)
    out = np.zeros(len(policies))
    for rep in range(replications):
        modes = _modes_for(markov, sim, init.mode, rep)
        for i, pol in enumerate(policies):
            _, bq, _, _ = _run(pol, cfg, markov, sim, modes, False)
            out[i] += bq.sum() / max(1, sim.horizon_steps)
    return out / replications


def max_box_exit(policy, cfg: HighwayConfig, markov: MarkovCapacityModel, sim: SimConfig,
                 starts: Sequence[HybridState], box_lo: np.ndarray, box_hi: np.ndarray) -> np.ndarray:
    """Largest exit (in units of n_jam) from the queue-pattern box, per start state.

    ``box_lo``/``box_hi`` are indexed by the queue bitmask (bit k set when q_k > 0).
    """
    sim.check(cfg, markov)
    out = np.zeros(len(starts))
    for i, st in enumerate(starts):
        modes = _modes_for(markov, sim, st.mode, i)
        _, _, _, worst = _run(policy, cfg, markov, sim, modes, False, boxes=(box_lo, box_hi), initial=st)
        out[i] = worst
    return out
