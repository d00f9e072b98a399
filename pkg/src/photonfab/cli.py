"""Command-line entry point.

Subcommands: ``fill`` (allocate a cluster to capacity and report the
trace), ``churn`` (fill then randomly deallocate), ``experiment e1..e4``
(the drivers), ``solve`` (one fragmented-placement instance from JSON),
and ``cost`` (collective cost breakdown for a slice shape). Global flags
pick the config file, seed, output directory, and row format.

Exit codes: 0 success, 1 usage or configuration error, 2 infeasible or
over-capacity solver results.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import sys
from pathlib import Path

from .cost_model import CollectiveCost, CostParams, bucket_allreduce
from .frag_alloc import check_capacity, problem_from_json, solve_fragmented
from .slicemodel import collective_rings, parse_mode, parse_request
from .topology import ClusterConfig, build_cluster
from .workload import (ExperimentResult, SimConfig, SliceDistribution, churn,
                       default_distribution, fill_cluster, run_experiment)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_dims(text) -> tuple[int, int, int]:
    if isinstance(text, (list, tuple)):
        return tuple(int(x) for x in text)
    return tuple(int(x) for x in str(text).lower().split("x"))


_CLUSTER_INTS = ("racks_count", "ports_per_tpu", "fibers_per_server_pair", "k_paths")
_CLUSTER_FLOATS = ("link_bandwidth", "alpha", "reconfig_delay",
                   "loss_per_crossing_db", "waveguide_loss_db_per_cm",
                   "loss_budget_db")


def config_from_doc(doc: dict) -> SimConfig:
    cluster_kw = {}
    for key, value in doc.get("cluster", {}).items():
        if key in ("rack_dims", "server_dims"):
            cluster_kw[key] = _parse_dims(value)
        elif key in _CLUSTER_INTS:
            cluster_kw[key] = int(value)
        elif key in _CLUSTER_FLOATS:
            cluster_kw[key] = float(value)
        else:
            raise UsageError(f"unknown [cluster] key {key!r}")
    kw = {"cluster": ClusterConfig(**cluster_kw)}
    work = doc.get("workload", {})
    for key, value in work.items():
        if key == "distribution":
            if isinstance(value, list):
                value = ",".join(value)
            kw["distribution"] = SliceDistribution.parse(value)
        elif key in ("trials", "fill_failure_limit"):
            kw[key] = int(value)
        elif key in ("churn_fraction", "free_target"):
            kw[key] = float(value)
        else:
            raise UsageError(f"unknown [workload] key {key!r}")
    cost = doc.get("cost", {})
    for key, value in cost.items():
        if key in ("gradient_bytes", "compute_seconds"):
            kw[key] = float(value)
        elif key == "ici_fractions":
            if isinstance(value, str):
                value = value.split(",")
            kw["ici_fractions"] = tuple(float(x) for x in value)
        else:
            raise UsageError(f"unknown [cost] key {key!r}")
    return SimConfig(**kw)


def load_config(path: str | None) -> SimConfig:
    """Read a SimConfig from an INI-style or JSON file; defaults when None."""
    if path is None:
        return SimConfig()
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        doc = json.loads(text)
    else:
        parser = configparser.ConfigParser()
        parser.read_string(text)
        doc = {section: dict(parser[section]) for section in parser.sections()}
    return config_from_doc(doc)


def _write_rows(outdir: Path, name: str, columns, rows, fmt: str) -> Path:
    outdir.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        path = outdir / f"{name}.csv"
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)
        path.write_text(buf.getvalue())
    else:
        path = outdir / f"{name}.json"
        path.write_text(json.dumps({"columns": list(columns),
                                    "rows": [list(r) for r in rows]},
                                   indent=2, sort_keys=True))
    return path


def _write_summary(outdir: Path, name: str, doc: dict) -> Path:
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / f"{name}_summary.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
    return path


def _cmd_fill(args, config: SimConfig) -> int:
    from random import Random
    cluster = build_cluster(config.cluster)
    slices = fill_cluster(cluster, config.distribution, Random(args.seed),
                          failure_limit=config.fill_failure_limit)
    rows = [(s.id, s.rack, "x".join(map(str, s.shape)), s.size,
             "x".join(map(str, s.anchor))) for s in slices]
    out = Path(args.out)
    rows_path = _write_rows(out, "fill_trace", ("slice", "rack", "shape",
                                                "size", "anchor"), rows, args.format)
    summary = {"command": "fill", "seed": args.seed, "config": config.to_dict(),
               "slices": len(slices),
               "allocated_fraction": cluster.allocated_fraction()}
    _write_summary(out, "fill", summary)
    print(f"allocated {len(slices)} slices "
          f"({cluster.allocated_fraction():.1%} of chips) -> {rows_path}")
    return 0


def _cmd_churn(args, config: SimConfig) -> int:
    from random import Random
    rng = Random(args.seed)
    cluster = build_cluster(config.cluster)
    fill_cluster(cluster, config.distribution, rng,
                 failure_limit=config.fill_failure_limit)
    victims = churn(cluster, args.fraction, rng, by=args.by)
    rows = [(sid,) for sid in victims]
    out = Path(args.out)
    rows_path = _write_rows(out, "churn_trace", ("deallocated_slice",), rows,
                            args.format)
    summary = {"command": "churn", "seed": args.seed, "config": config.to_dict(),
               "deallocated": len(victims),
               "free_fraction": cluster.free_chips() / config.cluster.total_chips}
    _write_summary(out, "churn", summary)
    print(f"deallocated {len(victims)} slices "
          f"({cluster.free_chips()} chips free) -> {rows_path}")
    return 0


def _cmd_experiment(args, config: SimConfig) -> int:
    result = run_experiment(args.which, config, args.seed)
    paths = result.write(args.out, args.format)
    print(result.summary_json_text())
    print(f"wrote {', '.join(str(p) for p in paths)}", file=sys.stderr)
    return 0


def _cmd_solve(args, config: SimConfig) -> int:
    problem = problem_from_json(Path(args.problem).read_text())
    solution = solve_fragmented(problem)
    if solution is None:
        print(json.dumps({"infeasible": True}, indent=2))
        return 2
    capacity = (problem.graph.edges[0].capacity if problem.graph.edges
                else config.cluster.fibers_per_server_pair)
    cap = check_capacity(solution, capacity)
    doc = {
        "mapping": list(solution.mapping),
        "routes": list(solution.routes),
        "paths": [list(p) for p in solution.paths],
        "objective": solution.objective,
        "edge_loads": list(solution.edge_loads),
        "capacity": capacity,
        "capacity_ok": cap.ok,
        "over_capacity_edges": list(cap.over_edges),
    }
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0 if cap.ok else 2


def _cmd_cost(args, config: SimConfig) -> int:
    request = parse_request(f"{args.shape}:{args.mode}")
    nbytes = float(args.bytes)
    rings, fraction = collective_rings(request.shape, config.cluster.rack_dims,
                                       request.mode)
    params = CostParams.from_config(config.cluster)
    if rings:
        total = bucket_allreduce(rings, nbytes, fraction)
        rs = CollectiveCost(total.alpha_steps // 2, total.beta_bytes / 2)
        ag = rs
    else:
        total = rs = ag = CollectiveCost(0, 0)
    setup = 1 if request.mode.kind == "morphlux" else 0
    rs = rs.with_reconfigs(setup)
    total = total.with_reconfigs(setup)
    rows = []
    for name, cost in (("reduce_scatter", rs), ("all_gather", ag),
                       ("all_reduce", total)):
        rows.append((name, cost.alpha_steps, cost.beta_bytes, cost.reconfigs,
                     cost.total_seconds(params)))
    if args.format == "json":
        print(json.dumps({
            "shape": args.shape, "mode": request.mode.label, "bytes": nbytes,
            "rings": list(rings), "bandwidth_fraction": fraction,
            "costs": [{"collective": r[0], "alpha_steps": r[1],
                       "beta_bytes": r[2], "reconfigs": r[3],
                       "seconds": r[4]} for r in rows],
        }, indent=2, sort_keys=True))
    else:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(("collective", "alpha_steps", "beta_bytes",
                         "reconfigs", "seconds"))
        writer.writerows(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="photonfab",
                     description="Photonic direct-connect datacenter simulator")
    parser.add_argument("--config", help="INI or JSON experiment recipe")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--format", choices=("csv", "json"), default="csv")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("fill", help="fill a cluster to capacity")

    churn_p = sub.add_parser("churn", help="fill then deallocate at random")
    churn_p.add_argument("--fraction", type=float, default=0.2)
    churn_p.add_argument("--by", choices=("slices", "chips"), default="slices")

    exp = sub.add_parser("experiment", help="run an experiment driver")
    exp.add_argument("which", choices=("e1", "e2", "e3", "e4"))

    solve_p = sub.add_parser("solve", help="solve a placement instance")
    solve_p.add_argument("problem", help="problem JSON file")

    cost_p = sub.add_parser("cost", help="collective cost breakdown")
    cost_p.add_argument("shape", help="slice shape, e.g. 4x2x1")
    cost_p.add_argument("mode", help="baseline, morphlux, or iciF")
    cost_p.add_argument("bytes", help="payload bytes, e.g. 1e9")
    return parser


_COMMANDS = {
    "fill": _cmd_fill,
    "churn": _cmd_churn,
    "experiment": _cmd_experiment,
    "solve": _cmd_solve,
    "cost": _cmd_cost,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = load_config(args.config)
        return _COMMANDS[args.command](args, config)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, json.JSONDecodeError,
            configparser.Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
