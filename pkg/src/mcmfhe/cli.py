"""Command-line entry point: ``run``, ``sweep``, ``validate`` and ``gen-trace``.

Exit codes: 0 success, 2 configuration or input error, 3 sweep finished
with failed points.
"""
from __future__ import annotations

import argparse
import itertools
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import config as cfgmod
from .errors import McmFheError
from .mapping import place_polynomial
from .reports import RunReport, derived_metrics, packet_trace_csv, summary_csv, write_text
from .scheduler import SimLog, compile, energy_account, lower, simulate
from .workload import WORKLOADS, HeOp, format_trace, gen_workload, parse_trace


def load_workload(name: str, spec: cfgmod.PackageSpec, seed: int = 0) -> list[HeOp]:
    """A registered workload name or a path to a trace file."""
    if name in WORKLOADS:
        return gen_workload(name, spec.params, seed=seed)
    path = Path(name)
    if not path.exists():
        raise McmFheError(f"unknown workload {name!r}: not one of {', '.join(WORKLOADS)} and no such file")
    return parse_trace(path.read_text(encoding="utf-8"))


def run_spec(spec: cfgmod.PackageSpec, trace: list[HeOp], workload: str = "", seed: int = 0,
             log: SimLog | None = None) -> RunReport:
    """compile -> lower -> simulate -> energy for one package."""
    spec.check()
    params = spec.params
    graph = compile(trace, params, spec.beta)
    placement = place_polynomial(params.L + params.K, params.N, spec.cluster)
    program = lower(graph, placement, spec["schedule.duplication"], spec["hbm.stacks"])
    sim = simulate(program, spec.core_model(), spec.link(), spec.hbm(), spec.prefetch_budget(),
                   spec.network_kwargs(), log)
    sim.energy, sim.energy_breakdown = energy_account(sim, spec.energy_table())
    return RunReport(spec.to_dict(), workload, seed, sim, derived_metrics(sim))


# ---------------------------------------------------------------------------
# Sweeps


@dataclass
class SweepPoint:
    index: int
    items: dict

    @property
    def name(self) -> str:
        return f"p{self.index:03d}"


def sweep_points(spec: cfgmod.PackageSpec) -> list[SweepPoint]:
    """Cartesian product of the configured axes, in a fixed order.

    ``sweep.cores`` resizes the package (lanes = 1024 / cores) and, without a
    mapping axis, uses ``d x d-BK-d/2 x d/2``.  With both axes, only mappings
    whose mesh has that many cores are kept.  No axes gives one point.
    """
    maps = spec["sweep.mappings"] or [None]
    dups = spec["sweep.duplication"] or [None]
    cores = spec["sweep.cores"] or [None]
    points = []
    for mapping, dup, n in itertools.product(maps, dups, cores):
        items: dict = {}
        if n is not None:
            mesh_cores = cfgmod.parse_mapping(mapping).mesh.n_cores if mapping else n
            if mesh_cores != n:
                continue
            items.update(cfgmod.profile_for_cores(spec, n, mapping).values)
        elif mapping is not None:
            items["package.mapping"] = mapping
            if spec["package.default_profile"]:
                items["core.lanes"] = cfgmod.TOTAL_LANES // cfgmod.parse_mapping(mapping).mesh.n_cores
        if dup is not None:
            items["schedule.duplication"] = str(dup).lower()
        points.append(SweepPoint(len(points), items))
    return points


def _run_point(args):
    spec_values, workload, seed, out_dir, name = args
    spec = cfgmod.PackageSpec(spec_values)
    row = {
        "point": name,
        "workload": workload,
        "mapping": spec["package.mapping"],
        "lanes": spec["core.lanes"],
        "duplication": spec["schedule.duplication"],
    }
    try:
        row["cores"] = spec.n_cores
        trace = load_workload(workload, spec, seed)
        rep = run_spec(spec, trace, workload, seed)
        write_text(Path(out_dir) / f"{name}.json", rep.to_json())
        row.update(status="ok", cycles=rep.sim.total_cycles, elements_moved=rep.derived["elements_moved"],
                   element_hops=rep.derived["element_hops"], hbm_bytes=rep.sim.hbm_bytes,
                   energy=repr(rep.sim.energy), eq2_benefit=rep.derived["eq2_benefit"])
    except (McmFheError, ValueError, OSError) as exc:
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


def run_sweep(spec: cfgmod.PackageSpec, workload: str, out_dir, jobs: int = 1, seed: int = 0) -> list[dict]:
    """Run every sweep point; failures are recorded, not raised."""
    points = sweep_points(spec)
    args = [(spec.with_items(p.items).values, workload, seed, str(out_dir), p.name) for p in points]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_point, args))
    else:
        rows = [_run_point(a) for a in args]
    base = next((r for r in rows if r["status"] == "ok"), None)
    for r in rows:
        if base is not None and r["status"] == "ok" and r["cycles"]:
            r["speedup"] = f"{base['cycles'] / r['cycles']:.6f}"
    write_text(Path(out_dir) / "summary.csv", summary_csv(rows))
    return rows


# ---------------------------------------------------------------------------
# Argument handling


def _load_spec(args) -> cfgmod.PackageSpec:
    if args.config:
        return cfgmod.load(args.config)
    return cfgmod.default_spec()


def cmd_run(args) -> int:
    spec = _load_spec(args).check()
    trace = load_workload(args.workload, spec, args.seed)
    log = SimLog() if args.trace_packets else None
    rep = run_spec(spec, trace, args.workload, args.seed, log)
    text = rep.to_json()
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)
    if args.trace_packets:
        write_text(args.trace_packets, packet_trace_csv(log.wire.values()))
    return 0


def cmd_sweep(args) -> int:
    spec = _load_spec(args).check()
    out = args.out or "sweep_out"
    rows = run_sweep(spec, args.workload, out, args.jobs, args.seed)
    failed = [r for r in rows if r["status"] != "ok"]
    print(f"{len(rows) - len(failed)}/{len(rows)} points ok; summary in {Path(out) / 'summary.csv'}")
    for r in failed:
        print(f"{r['point']} failed: {r['error']}", file=sys.stderr)
    return 3 if failed else 0


def cmd_validate(args) -> int:
    spec = _load_spec(args)
    errs = spec.validate()
    if args.workload and not errs:
        load_workload(args.workload, spec, args.seed)
    for e in errs:
        print(f"error: {e}", file=sys.stderr)
    if errs:
        return 2
    print(f"ok: {spec['package.mapping']}, {spec.n_cores} cores x {spec['core.lanes']} lanes")
    return 0


def cmd_gen_trace(args) -> int:
    spec = _load_spec(args)
    text = format_trace(gen_workload(args.workload, spec.params, seed=args.seed))
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcmfhe", description="Chiplet FHE accelerator simulator")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, workload_default="KsMicro"):
        sp.add_argument("--config", help="TOML config file (defaults apply when omitted)")
        sp.add_argument("--workload", default=workload_default,
                        help=f"one of {', '.join(WORKLOADS)} or a trace file path")
        sp.add_argument("--out", help="output path (directory for sweep)")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("run", help="simulate one package")
    common(sp)
    sp.add_argument("--trace-packets", help="write the per-packet CSV trace here")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="simulate every point of the configured sweep axes")
    common(sp)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("validate", help="check a config (and optionally a trace) without simulating")
    common(sp, workload_default=None)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("gen-trace", help="write a synthetic workload as a trace file")
    common(sp, workload_default="BootLike")
    sp.set_defaults(func=cmd_gen_trace)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except McmFheError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
