"""Command-line entry point.

Every run writes its CSV outputs and a ``manifest.json`` to ``--out-dir``.  The
manifest holds the resolved configuration, the arguments, seeds and SHA-256
digests of the outputs; ``ssctm replay manifest.json`` re-runs the command
from it and checks the outputs byte for byte.

Exit codes: 0 success, 2 invalid input, 3 infeasible design, 4 unsupported
scale, 1 anything else.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import tempfile
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigBundle, bundled_config_path, dumps_config, load_config, loads_config
from .design import (GridSpec, compare_strategies, design_full, design_localized, design_localized_sections,
                     design_localized_throughput, design_partial, drift_grid, drift_surface_csv,
                     hourly_designs, metering_schedule)
from .errors import ParseError, SSCTMError, SubproblemInfeasible, TooLarge, Unsupported, ValidationError
from .model import AffineControlPolicy
from .simulator import RNG_ALGORITHM, SimConfig, density_map, density_map_csv, metrics, run_metrics, simulate
from .stability import FULL, LOCALIZED, PARTIAL, PC_PRINTED, PC_PRINTED_RAW, PC_UNDERLINE, DesignScheme, mean_drift

log = logging.getLogger("ssctm")

EXIT_OK, EXIT_ERROR, EXIT_INVALID, EXIT_INFEASIBLE, EXIT_SCALE = 0, 1, 2, 3, 4
MANIFEST = "manifest.json"
DESIGNED = ("local", "partial", "full")


class Infeasible(Exception):
    """Raised after outputs are written when a design is not certified stable."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _resolve_config(spec: str) -> Path:
    p = Path(spec)
    if p.exists():
        return p
    try:
        return bundled_config_path(spec)
    except ParseError:
        raise ParseError(f"{spec}: no such file or bundled config") from None


def _triple(text: str, name: str) -> tuple[float, float, float]:
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise ValidationError(name, f"expected lo,hi,step, got {text!r}") from None
    if len(vals) != 3:
        raise ValidationError(name, f"expected lo,hi,step, got {text!r}")
    return vals


def _with_sim(bundle: ConfigBundle, args) -> SimConfig:
    sim = bundle.sim or SimConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "horizon_steps", None) is not None:
        changes["horizon_steps"] = args.horizon_steps
    if changes:
        sim = replace(sim, **changes)
    sim.check(bundle.highway, bundle.markov)
    return sim


def _ramps(bundle: ConfigBundle, args) -> tuple[int, ...]:
    if getattr(args, "ramps", None):
        ramps = tuple(int(x) - 1 for x in args.ramps.split(","))
        if not all(1 <= k < bundle.K for k in ramps):
            raise ValidationError("--ramps", f"ramps are cell numbers in 2..{bundle.K}")
        return tuple(sorted(set(ramps)))
    if bundle.design is not None and bundle.design.ramps is not None:
        return bundle.design.ramps
    return tuple(range(1, bundle.K))


def _grid(bundle: ConfigBundle, args, n: int) -> GridSpec:
    d = bundle.design
    u = _triple(args.grid_u, "--grid-u") if args.grid_u else (d.grid_u if d else None)
    k = _triple(args.grid_kappa, "--grid-kappa") if args.grid_kappa else (d.grid_kappa if d else None)
    kw = {}
    if u is not None:
        kw["u"] = u
    if k is not None:
        kw["kappa"] = k
    return GridSpec.uniform(n, **kw)


def _window(bundle: ConfigBundle, args):
    if getattr(args, "window", None) is not None:
        return None if args.window < 0 else args.window
    return bundle.design.window if bundle.design is not None else None


def _scheme(args, default: str) -> DesignScheme:
    return DesignScheme(args.scheme or default, pc_weight=args.pc_weight)


def _policy(bundle: ConfigBundle) -> AffineControlPolicy:
    if bundle.policy is None:
        raise ValidationError("policy", "the config has no [policy] section")
    return bundle.policy


def _baseline(bundle: ConfigBundle, name: str):
    for n, spec in bundle.baselines:
        if n == name:
            return spec
    if name == "baseline" and bundle.baseline is not None:
        return bundle.baseline
    return None


def _control(bundle: ConfigBundle, name: str):
    if name == "none":
        return None
    if name == "policy":
        return _policy(bundle)
    spec = _baseline(bundle, name)
    if spec is None:
        known = ["none", "policy", *[n for n, _ in bundle.baselines]]
        raise ValidationError("--control", f"unknown controller {name!r}; choose from {', '.join(known)}")
    return spec


def _designer(kind: str, bundle: ConfigBundle, args):
    """Callable mapping a highway (with its demands) to a DesignResult."""
    ramps = _ramps(bundle, args)
    grid = _grid(bundle, args, len(ramps))
    threads = args.threads
    mk = bundle.markov

    if kind == "local":
        def run(cfg):
            if cfg.K == 2:
                res = design_localized(cfg, mk, grid, threads=threads)
                if not res.feasible:
                    thr = design_localized_throughput(cfg, mk, grid, threads=threads)
                    res = thr if thr.feasible else res
                return res
            return design_localized_sections(cfg, mk, grid, ramps, threads=threads, throughput=True)
    elif kind == "partial":
        scheme = DesignScheme(PARTIAL, pc_weight=args.pc_weight)
        window = _window(bundle, args)

        def run(cfg):
            return design_partial(cfg, mk, grid, scheme, ramps, window=window, strict=False,
                                  threads=threads, throughput=True)
    elif kind == "full":
        def run(cfg):
            return design_full(cfg, mk, grid, threads=threads)
    else:
        raise ValidationError("strategy", f"unknown designed strategy {kind!r}")
    return run


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class _Run:
    """Output directory plus manifest bookkeeping."""

    def __init__(self, args, bundle: ConfigBundle, argv: list[str]):
        self.out = Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.args = args
        self.bundle = bundle
        self.argv = argv
        self.files: list[str] = []
        self.t0 = time.perf_counter()
        self.started = datetime.now(timezone.utc).isoformat(timespec="seconds")
        self.extra: dict = {}

    def write(self, name: str, text: str) -> None:
        (self.out / name).write_text(text)
        if name not in self.files:
            self.files.append(name)

    def manifest(self, status: str, sim: SimConfig | None = None) -> None:
        seeds = {"rng": RNG_ALGORITHM}
        if sim is not None:
            seeds["seed"] = sim.seed
            reps = getattr(self.args, "replications", None)
            seeds["replications"] = list(range(reps)) if reps else [getattr(self.args, "replication", 0)]
        data = {
            "tool": "ssctm",
            "version": __version__,
            "command": self.args.command,
            "argv": self.argv,
            "status": status,
            "config_toml": dumps_config(self.bundle),
            "config_sha256": hashlib.sha256(dumps_config(self.bundle).encode()).hexdigest(),
            "seeds": seeds,
            "started_utc": self.started,
            "runtime_s": round(time.perf_counter() - self.t0, 3),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "files": {f: {"sha256": _sha256(self.out / f), "bytes": (self.out / f).stat().st_size}
                      for f in self.files},
            **self.extra,
        }
        (self.out / MANIFEST).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(args, bundle: ConfigBundle, run: _Run) -> SimConfig:
    sim = _with_sim(bundle, args)
    control = _control(bundle, args.control)
    if args.metered:
        control = metering_schedule(control, sim, bundle.metering_window_hr)
    traj = simulate(control, bundle.highway, bundle.markov, sim, args.replication)
    run.write("trajectory.csv", traj.to_csv())
    run.write("metrics.csv", metrics(traj, bundle.highway, sim).to_csv())
    if args.replications and args.replications > 1:
        lines = ["replication,time_avg_queue_veh,vht_veh_hr"]
        for r in range(args.replications):
            m = run_metrics(control, bundle.highway, bundle.markov, sim, r)
            lines.append(f"{r},{float(m.time_avg_queue_veh)!r},{float(m.vht_veh_hr)!r}")
        run.write("replications.csv", "\n".join(lines) + "\n")
    return sim


def cmd_drift(args, bundle: ConfigBundle, run: _Run) -> None:
    default = LOCALIZED if bundle.K == 2 else FULL
    scheme = _scheme(args, default)
    if bundle.policy is not None:
        report = mean_drift(scheme, bundle.policy, bundle.highway, bundle.markov)
        run.write("drift.txt", report.to_text())
        run.write("drift.csv", report.to_csv())
        print(report.to_text(), end="")
    if args.grid_u or args.grid_kappa:
        ramps = _ramps(bundle, args)
        res = drift_grid(bundle.highway, bundle.markov, _grid(bundle, args, len(ramps)), scheme, ramps,
                         threads=args.threads)
        run.write("drift_surface.csv", drift_surface_csv(res) if len(ramps) == 1 else res.log_csv())
    elif bundle.policy is None:
        raise ValidationError("policy", "drift needs a [policy] section or a grid")


def cmd_design(args, bundle: ConfigBundle, run: _Run) -> None:
    cfg, mk = bundle.highway, bundle.markov
    ramps = _ramps(bundle, args)
    grid = _grid(bundle, args, len(ramps))
    mode = args.mode
    if mode == "local":
        if cfg.K == 2:
            res = design_localized(cfg, mk, grid, keep_log=args.log, threads=args.threads)
        else:
            res = design_localized_sections(cfg, mk, grid, ramps, threads=args.threads)
    elif mode == "local-throughput":
        if cfg.K != 2:
            raise Unsupported("local-throughput is defined for two-cell sections")
        res = design_localized_throughput(cfg, mk, grid, threads=args.threads)
    elif mode == "full":
        res = design_full(cfg, mk, grid, keep_log=args.log, threads=args.threads,
                          scheme=DesignScheme(FULL))
    else:
        scheme = DesignScheme(PARTIAL, pc_weight=args.pc_weight)
        try:
            res = design_partial(cfg, mk, grid, scheme, ramps, window=_window(bundle, args),
                                 strict=not args.keep_going, threads=args.threads)
        except SubproblemInfeasible as e:
            run.extra["failed_stage"] = e.stage + 1
            raise
    run.write("design.csv", res.to_csv())
    run.write("summary.csv", res.summary_csv())
    if res.report is not None:
        run.write("drift.txt", res.report.to_text())
    if args.log and res.log:
        run.write("candidates.csv", res.log_csv())
        if len(res.ramps) == 1:
            run.write("drift_surface.csv", drift_surface_csv(res))
    print(res.to_csv(), end="")
    if not res.feasible:
        raise Infeasible(f"design not certified stable (objective {res.objective:.6g})")


def cmd_compare(args, bundle: ConfigBundle, run: _Run) -> SimConfig:
    sim = _with_sim(bundle, args)
    cfg = bundle.highway
    window = bundle.metering_window_hr
    names = [s.strip() for s in args.strategies.split(",") if s.strip()]
    if not names:
        raise ValidationError("--strategies", "at least one strategy is needed")
    strategies = []
    designs = ["strategy,start_step,ramp,u_veh_per_hr,kappa_kmh,objective,feasible"]
    for name in names:
        if name in DESIGNED:
            sched, results = hourly_designs(cfg, sim, window, _designer(name, bundle, args))
            for s, res in results:
                for k in res.ramps:
                    designs.append(f"{name},{s},{k + 1},{float(res.policy.u_full[k])!r},{float(res.policy.kappa_full[k])!r},"
                                   f"{float(res.objective)!r},{int(res.feasible)}")
            strategies.append((name, sched))
        else:
            strategies.append((name, metering_schedule(_control(bundle, name), sim, window)))
    table = compare_strategies(cfg, bundle.markov, sim, strategies, args.replications,
                               report_window=window if args.report_window else None)
    run.write("comparison.csv", table.to_csv())
    if len(designs) > 1:
        run.write("designs.csv", "\n".join(designs) + "\n")
    tests = ["strategy,reference,metric,p_value_less"]
    if "none" in names:
        for n in names:
            if n != "none":
                for metric in ("vht", "queue"):
                    tests.append(f"{n},none,{metric},{table.paired_test(n, 'none', metric)!r}")
    if "partial" in names and "local" in names:
        tests.append(f"partial,local,vht,{table.paired_test('partial', 'local', 'vht')!r}")
    run.write("tests.csv", "\n".join(tests) + "\n")
    print(table.to_csv(), end="")
    return sim


def cmd_density(args, bundle: ConfigBundle, run: _Run) -> SimConfig:
    sim = _with_sim(bundle, args)
    control = _control(bundle, args.control)
    if args.metered:
        control = metering_schedule(control, sim, bundle.metering_window_hr)
    traj = simulate(control, bundle.highway, bundle.markov, sim, args.replication)
    grid = density_map(traj, bundle.highway, args.bin_minutes)
    run.write("density_map.csv", density_map_csv(grid, args.bin_minutes, sim.start_hour))
    return sim


COMMANDS = {"simulate": cmd_simulate, "drift": cmd_drift, "design": cmd_design,
            "compare": cmd_compare, "export-density-map": cmd_density}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="config file, or a bundled name (twocell, threecell, i210)")
    common.add_argument("--out-dir", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="override [sim] seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads for grid searches")
    common.add_argument("--scheme", choices=(LOCALIZED, FULL, PARTIAL), help="drift scheme")
    common.add_argument("--pc-weight", default=PC_UNDERLINE, choices=(PC_UNDERLINE, PC_PRINTED, PC_PRINTED_RAW),
                        help="density weight of the partial scheme")
    common.add_argument("--grid-u", help="u grid as lo,hi,step in veh/hr")
    common.add_argument("--grid-kappa", help="kappa grid as lo,hi,step in km/hr")
    common.add_argument("--ramps", help="designed ramps as 1-based cell numbers, comma separated")
    common.add_argument("--window", type=int, help="partial design window in cells (-1 for the whole highway)")
    common.add_argument("--replications", type=int, default=None, help="Monte-Carlo replications")
    common.add_argument("--horizon-steps", type=int, help="override [sim] horizon_steps")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ssctm", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"ssctm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate one replication")
    s.add_argument("--control", default="policy", help="none, policy or a baseline name")
    s.add_argument("--replication", type=int, default=0)
    s.add_argument("--metered", action="store_true", help="control only inside the metering window")

    sub.add_parser("drift", parents=[common], help="mean drift of the config policy, or over a grid")

    d = sub.add_parser("design", parents=[common], help="grid-search a metering policy")
    d.add_argument("--mode", required=True, choices=("local", "local-throughput", "full", "partial"))
    d.add_argument("--log", action="store_true", help="write the per-candidate log")
    d.add_argument("--keep-going", action="store_true", help="partial: keep the best point of infeasible stages")

    c = sub.add_parser("compare", parents=[common], help="paired comparison of strategies")
    c.add_argument("--strategies", default="none,policy",
                   help="comma list of none, policy, baseline names, local, partial, full")
    c.add_argument("--all-hours", dest="report_window", action="store_false",
                   help="report every hour instead of the metering window")

    e = sub.add_parser("export-density-map", parents=[common], help="cell x time density grid")
    e.add_argument("--control", default="none")
    e.add_argument("--replication", type=int, default=0)
    e.add_argument("--bin-minutes", type=float, default=60.0)
    e.add_argument("--metered", action="store_true")

    r = sub.add_parser("replay", help="re-run a manifest and check outputs are identical")
    r.add_argument("manifest", type=Path)
    r.add_argument("--out-dir", help="where to re-run (default: a temporary directory)")
    return p


def _execute(args, argv: list[str], bundle: ConfigBundle | None = None) -> int:
    if bundle is None:
        bundle = load_config(_resolve_config(args.config))
    if args.replications is None:
        args.replications = 10 if args.command == "compare" else 0
    if args.replications < 0 or (args.command == "compare" and args.replications < 1):
        raise ValidationError("--replications", "must be positive")
    if args.threads < 1:
        raise ValidationError("--threads", "must be at least 1")
    run = _Run(args, bundle, argv)
    sim = None
    try:
        sim = COMMANDS[args.command](args, bundle, run)
    except Infeasible as e:
        run.manifest("infeasible", sim)
        print(f"ssctm: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SubproblemInfeasible:
        run.manifest("infeasible", sim)
        raise
    run.manifest("ok", sim)
    return EXIT_OK


def replay(manifest_path: Path, out_dir: str | None = None) -> tuple[bool, dict]:
    """Re-run a manifest; returns (identical, {file: (expected, got)} mismatches)."""
    data = json.loads(Path(manifest_path).read_text())
    bundle = loads_config(data["config_toml"], str(manifest_path))
    argv = list(data["argv"])
    target = out_dir or tempfile.mkdtemp(prefix="ssctm-replay-")
    # swap the output directory, keep everything else
    if "--out-dir" in argv:
        argv[argv.index("--out-dir") + 1] = target
    else:
        argv += ["--out-dir", target]
    args = build_parser().parse_args(argv)
    try:
        _execute(args, argv, bundle)
    except (SubproblemInfeasible, Infeasible):
        pass
    bad = {}
    for name, info in data["files"].items():
        p = Path(target) / name
        got = _sha256(p) if p.exists() else None
        if got != info["sha256"]:
            bad[name] = (info["sha256"], got)
    return not bad, bad


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            ok, bad = replay(args.manifest, args.out_dir)
            for name, (want, got) in bad.items():
                print(f"mismatch {name}: expected {want}, got {got}", file=sys.stderr)
            print("identical" if ok else "DIFFERENT")
            return EXIT_OK if ok else EXIT_ERROR
        return _execute(args, argv)
    except (ValidationError, ParseError) as e:
        print(f"ssctm: invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID
    except SubproblemInfeasible as e:
        print(f"ssctm: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (TooLarge, Unsupported) as e:
        print(f"ssctm: unsupported scale: {e}", file=sys.stderr)
        return EXIT_SCALE
    except SSCTMError as e:
        print(f"ssctm: {e}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as e:
        print(f"ssctm: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
