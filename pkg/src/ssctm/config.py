"""TOML configuration files.

Sections and keys (units in the key names)::

    [highway]   length_km, free_flow_speed_kmh, congestion_wave_speed_kmh,
                jam_density_veh_per_km, mainline_ratio          (K-vectors)
    [buffers]   capacity_veh_per_hr, demand_veh_per_hr          (K-vectors)
    [markov]    capacities_veh_per_hr (m rows of K), transition_rates_per_hr (m x m)
    [policy]    u_veh_per_hr, kappa_kmh                         (K-1 vectors, ramps 2..K)
    [baseline]  variant ("alinea" | "metaline"), name, n_crit_veh_per_km, K_R or K_P/K_I,
                update_period_s; several baselines go in [[baseline]] tables
    [sim]       dt_s, horizon_steps, seed, queue_cap_veh_per_lane, lanes_per_ramp,
                start_hour, metering_window_hr, initial_mode, initial_queues_veh,
                initial_densities_veh_per_km,
                demand_schedule = [{start_hr = ..., alpha = [...]}, ...]
    [design]    grid_u, grid_kappa ([lo, hi, step]), ramps (1-based cells), window

Cells, ramps and modes are 1-based in files and 0-based in code.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .baselines import ALINEA, METALINE, BaselineSpec
from .errors import ParseError, ValidationError
from .model import (AffineControlPolicy, BufferParams, CellParams, HighwayConfig, HybridState,
                    MarkovCapacityModel, check_fundamental_diagram)
from .simulator import SimConfig

CELL_KEYS = ("length_km", "free_flow_speed_kmh", "congestion_wave_speed_kmh",
             "jam_density_veh_per_km", "mainline_ratio")
BUFFER_KEYS = ("capacity_veh_per_hr", "demand_veh_per_hr")


@dataclass(frozen=True)
class DesignDefaults:
    grid_u: tuple[float, float, float] = (2500.0, 6000.0, 50.0)
    grid_kappa: tuple[float, float, float] = (0.0, 50.0, 1.0)
    ramps: tuple[int, ...] | None = None  # 0-based cells
    window: int | None = None


@dataclass
class ConfigBundle:
    highway: HighwayConfig
    markov: MarkovCapacityModel
    policy: AffineControlPolicy | None = None
    baseline: BaselineSpec | None = None  # the first of ``baselines``
    baselines: tuple[tuple[str, BaselineSpec], ...] = ()
    sim: SimConfig | None = None
    design: DesignDefaults | None = None
    metering_window_hr: tuple[float, float] | None = None
    extra: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.highway.K


def _need(sec: dict, key: str, where: str):
    if key not in sec:
        raise ValidationError(f"{where}.{key}", "missing")
    return sec[key]


def _vector(sec: dict, key: str, where: str, n: int | None = None) -> list[float]:
    val = _need(sec, key, where)
    if not isinstance(val, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in val):
        raise ValidationError(f"{where}.{key}", "must be a list of numbers")
    if n is not None and len(val) != n:
        raise ValidationError(f"{where}.{key}", f"expected {n} entries, got {len(val)}")
    return [float(x) for x in val]


def _matrix(sec: dict, key: str, where: str) -> list[list[float]]:
    val = _need(sec, key, where)
    if not isinstance(val, list) or not all(isinstance(r, list) for r in val):
        raise ValidationError(f"{where}.{key}", "must be a list of rows")
    try:
        return [[float(x) for x in row] for row in val]
    except (TypeError, ValueError):
        raise ValidationError(f"{where}.{key}", "rows must hold numbers") from None


def _reprefix(exc: ValidationError, prefix: str) -> ValidationError:
    return ValidationError(f"{prefix}.{exc.field}", exc.reason)


def parse_config(data: dict[str, Any]) -> ConfigBundle:
    """Build and validate a bundle from parsed TOML."""
    hw = _need(data, "highway", "config")
    cols = {k: _vector(hw, k, "highway") for k in CELL_KEYS}
    K = len(cols["length_km"])
    if K < 1:
        raise ValidationError("highway.length_km", "need at least one cell")
    for k in CELL_KEYS:
        if len(cols[k]) != K:
            raise ValidationError(f"highway.{k}", f"expected {K} entries, got {len(cols[k])}")
    cells = []
    for i in range(K):
        try:
            cells.append(CellParams(*[cols[k][i] for k in CELL_KEYS]))
        except ValidationError as e:
            raise ValidationError(f"highway.{e.field}[{i + 1}]", e.reason) from None
    bf = _need(data, "buffers", "config")
    bcols = {k: _vector(bf, k, "buffers", K) for k in BUFFER_KEYS}
    buffers = []
    for i in range(K):
        try:
            buffers.append(BufferParams(*[bcols[k][i] for k in BUFFER_KEYS]))
        except ValidationError as e:
            raise ValidationError(f"buffers.{e.field}[{i + 1}]", e.reason) from None
    try:
        cfg = HighwayConfig(tuple(cells), tuple(buffers))
    except ValidationError as e:
        raise _reprefix(e, "highway") from None

    mk = _need(data, "markov", "config")
    caps = _matrix(mk, "capacities_veh_per_hr", "markov")
    rates = _matrix(mk, "transition_rates_per_hr", "markov") if "transition_rates_per_hr" in mk else []
    if any(len(r) != K for r in caps):
        raise ValidationError("markov.capacities_veh_per_hr", f"every mode row needs {K} entries")
    try:
        markov = MarkovCapacityModel(np.array(caps), np.array(rates) if rates else np.zeros((0, 0)))
    except ValidationError as e:
        raise ValidationError(e.field.replace("markov.rates", "markov.transition_rates_per_hr")
                              .replace("markov.capacities", "markov.capacities_veh_per_hr"), e.reason) from None
    check_fundamental_diagram(cfg, markov)

    bundle = ConfigBundle(cfg, markov)
    if "policy" in data:
        sec = data["policy"]
        u = _vector(sec, "u_veh_per_hr", "policy", K - 1)
        kap = _vector(sec, "kappa_kmh", "policy", K - 1)
        try:
            bundle.policy = AffineControlPolicy(tuple(u), tuple(kap))
        except ValidationError as e:
            raise _reprefix(e, "policy") from None
    if "baseline" in data:
        rows = data["baseline"]
        many = isinstance(rows, list)
        rows = rows if many else [rows]
        specs = []
        for i, sec in enumerate(rows):
            where = f"baseline[{i + 1}]" if many else "baseline"
            if not isinstance(sec, dict):
                raise ValidationError(where, "must be a table")
            specs.append(_parse_baseline(sec, where, K))
        names = [n for n, _ in specs]
        if len(set(names)) != len(names):
            raise ValidationError("baseline", "baseline names must be distinct")
        bundle.baselines = tuple(specs)
        bundle.baseline = specs[0][1]
    if "sim" in data:
        bundle.sim, bundle.metering_window_hr = _parse_sim(data["sim"], cfg, markov)
    if "design" in data:
        sec = data["design"]
        ramps = sec.get("ramps")
        if ramps is not None:
            if not all(isinstance(x, int) and 2 <= x <= K for x in ramps):
                raise ValidationError("design.ramps", f"ramps are cell numbers in 2..{K}")
            ramps = tuple(int(x) - 1 for x in ramps)
        win = sec.get("window")
        if win is not None and (not isinstance(win, int) or win < 0):
            raise ValidationError("design.window", "must be a non-negative integer")
        bundle.design = DesignDefaults(
            tuple(_vector(sec, "grid_u", "design", 3)) if "grid_u" in sec else DesignDefaults.grid_u,
            tuple(_vector(sec, "grid_kappa", "design", 3)) if "grid_kappa" in sec else DesignDefaults.grid_kappa,
            ramps, win)
    known = {"highway", "buffers", "markov", "policy", "baseline", "sim", "design"}
    bundle.extra = {k: v for k, v in data.items() if k not in known}
    return bundle


def _parse_baseline(sec: dict, where: str, K: int) -> tuple[str, BaselineSpec]:
    variant = _need(sec, "variant", where)
    nc = _vector(sec, "n_crit_veh_per_km", where, K)
    per = sec.get("update_period_s")
    name = str(sec.get("name", variant))
    try:
        if variant == ALINEA:
            kr = _need(sec, "K_R", where)
            kr = [float(x) for x in kr] if isinstance(kr, list) else float(kr)
            spec = BaselineSpec(ALINEA, np.array(nc), K_R=kr, update_period_s=per)
        elif variant == METALINE:
            spec = BaselineSpec(METALINE, np.array(nc), K_P=np.array(_matrix(sec, "K_P", where)),
                                K_I=np.array(_matrix(sec, "K_I", where)), update_period_s=per)
        else:
            raise ValidationError(f"{where}.variant", f"unknown variant {variant!r}")
    except ValidationError as e:
        raise ValidationError(e.field.replace("baseline", where, 1), e.reason) from None
    return name, spec


def _parse_sim(sec: dict, cfg: HighwayConfig, markov: MarkovCapacityModel):
    K = cfg.K
    dt_s = float(sec.get("dt_s", 10.0))
    if not dt_s > 0:
        raise ValidationError("sim.dt_s", "must be positive")
    dt = dt_s / 3600.0
    start = float(sec.get("start_hour", 0.0))
    sched = []
    for i, row in enumerate(sec.get("demand_schedule", [])):
        if not isinstance(row, dict) or "start_hr" not in row or "alpha" not in row:
            raise ValidationError(f"sim.demand_schedule[{i + 1}]", "rows need start_hr and alpha")
        steps = (float(row["start_hr"]) - start) / dt
        if abs(steps - round(steps)) > 1e-6:
            raise ValidationError(f"sim.demand_schedule[{i + 1}].start_hr", "must fall on a time step")
        sched.append((int(round(steps)), tuple(_vector(row, "alpha", f"sim.demand_schedule[{i + 1}]", K))))
    init = None
    if any(k in sec for k in ("initial_mode", "initial_queues_veh", "initial_densities_veh_per_km")):
        mode = int(sec.get("initial_mode", 1)) - 1
        q = _vector(sec, "initial_queues_veh", "sim", K) if "initial_queues_veh" in sec else [0.0] * K
        n = _vector(sec, "initial_densities_veh_per_km", "sim", K) if "initial_densities_veh_per_km" in sec else [0.0] * K
        init = HybridState(mode, np.array(q), np.array(n))
    lanes = sec.get("lanes_per_ramp")
    window = sec.get("metering_window_hr")
    if window is not None:
        window = tuple(_vector(sec, "metering_window_hr", "sim", 2))
        if not window[0] < window[1]:
            raise ValidationError("sim.metering_window_hr", "start must precede end")
    try:
        sim = SimConfig(dt_hr=dt, horizon_steps=int(sec.get("horizon_steps", 100_000)),
                        seed=int(sec.get("seed", 0)), queue_cap_veh_per_lane=sec.get("queue_cap_veh_per_lane"),
                        lanes_per_ramp=tuple(lanes) if lanes is not None else None, initial_state=init,
                        demand_schedule=tuple(sched), start_hour=start)
        sim.check(cfg, markov)
    except ValidationError as e:
        raise ValidationError(e.field, e.reason) from None
    return sim, window


def load_config(path) -> ConfigBundle:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ParseError(f"{path}: {e.strerror}") from None
    return loads_config(text, str(path))


def loads_config(text: str, name: str = "<string>") -> ConfigBundle:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ParseError(f"{name}: {e}") from None
    return parse_config(data)


# ---------------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------------

def _num(x: float):
    x = float(x)
    return int(x) if x.is_integer() and abs(x) < 2**53 else x


def _nums(xs) -> list:
    return [_num(x) for x in xs]


def to_dict(bundle: ConfigBundle) -> dict[str, Any]:
    cfg, mk = bundle.highway, bundle.markov
    out: dict[str, Any] = {
        "highway": {
            "length_km": _nums(cfg.length),
            "free_flow_speed_kmh": _nums(cfg.v),
            "congestion_wave_speed_kmh": _nums(cfg.w),
            "jam_density_veh_per_km": _nums(cfg.n_jam),
            "mainline_ratio": _nums(cfg.beta),
        },
        "buffers": {"capacity_veh_per_hr": _nums(cfg.U), "demand_veh_per_hr": _nums(cfg.alpha)},
        "markov": {"capacities_veh_per_hr": [_nums(r) for r in mk.capacities],
                   "transition_rates_per_hr": [_nums(r) for r in mk.rates]},
    }
    if bundle.policy is not None:
        out["policy"] = {"u_veh_per_hr": _nums(bundle.policy.u_veh_per_hr),
                         "kappa_kmh": _nums(bundle.policy.kappa_kmh)}
    named = bundle.baselines
    if not named and bundle.baseline is not None:
        named = ((bundle.baseline.variant, bundle.baseline),)
    if named:
        rows = []
        for name, b in named:
            sec: dict[str, Any] = {"variant": b.variant}
            if name != b.variant:
                sec["name"] = name
            sec["n_crit_veh_per_km"] = _nums(b.n_crit)
            if b.variant == ALINEA:
                sec["K_R"] = _nums(b.K_R)
            else:
                sec["K_P"] = [_nums(r) for r in b.K_P]
                sec["K_I"] = [_nums(r) for r in b.K_I]
            if b.update_period_s is not None:
                sec["update_period_s"] = _num(b.update_period_s)
            rows.append(sec)
        out["baseline"] = rows[0] if len(rows) == 1 else rows
    if bundle.sim is not None:
        s = bundle.sim
        sec = {"dt_s": _num(round(s.dt_hr * 3600.0, 9)), "horizon_steps": s.horizon_steps, "seed": s.seed,
               "start_hour": _num(s.start_hour)}
        if s.queue_cap_veh_per_lane is not None:
            sec["queue_cap_veh_per_lane"] = _num(s.queue_cap_veh_per_lane)
        if s.lanes_per_ramp is not None:
            sec["lanes_per_ramp"] = list(s.lanes_per_ramp)
        if bundle.metering_window_hr is not None:
            sec["metering_window_hr"] = _nums(bundle.metering_window_hr)
        if s.initial_state is not None:
            sec["initial_mode"] = s.initial_state.mode + 1
            sec["initial_queues_veh"] = _nums(s.initial_state.q)
            sec["initial_densities_veh_per_km"] = _nums(s.initial_state.n)
        if s.demand_schedule:
            sec["demand_schedule"] = [{"start_hr": _num(round(s.start_hour + st * s.dt_hr, 9)), "alpha": _nums(a)}
                                      for st, a in s.demand_schedule]
        out["sim"] = sec
    if bundle.design is not None:
        d = bundle.design
        sec = {"grid_u": _nums(d.grid_u), "grid_kappa": _nums(d.grid_kappa)}
        if d.ramps is not None:
            sec["ramps"] = [k + 1 for k in d.ramps]
        if d.window is not None:
            sec["window"] = d.window
        out["design"] = sec
    out.update(bundle.extra)
    return out


def dumps_config(bundle: ConfigBundle) -> str:
    return tomli_w.dumps(to_dict(bundle))


def write_config(bundle: ConfigBundle, path) -> None:
    Path(path).write_text(dumps_config(bundle))


def bundled_config_path(name: str) -> Path:
    """Path of a config shipped with the package (twocell, threecell, i210)."""
    base = Path(__file__).parent / "configs"
    p = base / name
    if not p.suffix:
        p = p.with_suffix(".cfg")
    if not p.exists():
        raise ParseError(f"no bundled config named {name!r}")
    return p
