"""Workload generation and experiment drivers.

Provides the slice-size distribution sampler, the cluster fill and churn
protocols, and the four experiment drivers:

  e1  fragmentation index per rack after fill plus slice churn
  e2  per-rack SerDes port utilization and bandwidth fraction by mode
  e3  post-churn allocation success of large slices, contiguous vs
      fragmented vs an ideal-switch oracle
  e4  parametric training-iteration times and per-rack throughput by mode

Every driver is deterministic for a fixed (config, seed): trials use
derived integer seeds and aggregation order is fixed.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from random import Random

from .alloc_contiguous import (allocate_contiguous, deallocate,
                               fragmentation_index, largest_free_block)
from .control_plane import realize_slice, server_tpus, server_internal_links
from .cost_model import CostParams, train_iter_time
from .frag_alloc import AssignmentProblem, check_capacity, request_graph, solve_fragmented
from .slicemodel import (BASELINE, MORPHLUX, Mode, Slice, SliceRequest, ici,
                         usable_dims)
from .topology import Cluster, ClusterConfig, Dims, Rack, build_cluster, _prod


@dataclass(frozen=True)
class SliceDistribution:
    """Weighted slice shapes; probabilities must sum to one."""

    entries: tuple[tuple[Dims, float], ...]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("distribution needs at least one shape")
        total = sum(w for _, w in self.entries)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {total}, expected 1")
        if any(w < 0 for _, w in self.entries):
            raise ValueError("probabilities must be nonnegative")
        if any(len(s) != 3 or min(s) < 1 for s, _ in self.entries):
            raise ValueError("shapes must be three positive extents")

    def sample(self, rng: Random) -> Dims:
        shapes = [s for s, _ in self.entries]
        weights = [w for _, w in self.entries]
        return rng.choices(shapes, weights)[0]

    @classmethod
    def parse(cls, text: str) -> "SliceDistribution":
        """Parse ``2x2x1:0.25,4x2x1:0.75`` style distribution strings."""
        entries = []
        for part in text.split(","):
            shape_text, _, weight = part.strip().partition(":")
            shape = tuple(int(x) for x in shape_text.lower().split("x"))
            entries.append((shape, float(weight)))
        return cls(tuple(entries))


# Sub-rack slice sizes used throughout the experiments; one server-aligned
# canonical shape per size for the even-fill protocol.
EXPERIMENT_SIZES = (4, 8, 16, 32)
CANONICAL_SHAPES: dict[int, Dims] = {
    4: (2, 2, 1),
    8: (2, 2, 2),
    16: (4, 2, 2),
    32: (4, 4, 2),
}


def default_distribution() -> SliceDistribution:
    """Uniform over the four sub-rack sizes, split over their torus shapes."""
    per_size = {
        4: [(4, 1, 1), (2, 2, 1)],
        8: [(4, 2, 1), (2, 2, 2)],
        16: [(4, 4, 1), (4, 2, 2)],
        32: [(4, 4, 2)],
    }
    entries = []
    for size in EXPERIMENT_SIZES:
        shapes = per_size[size]
        for shape in shapes:
            entries.append((shape, 0.25 / len(shapes)))
    return SliceDistribution(tuple(entries))


@dataclass(frozen=True)
class SimConfig:
    """Full experiment recipe: fabric, workload, and model constants."""

    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    distribution: SliceDistribution = field(default_factory=default_distribution)
    trials: int = 16
    fill_failure_limit: int = 50
    churn_fraction: float = 0.2
    free_target: float = 0.3
    gradient_bytes: float = 1e9
    compute_seconds: float = 0.01
    ici_fractions: tuple[float, ...] = (0.7, 0.5, 0.25)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["distribution"] = ["x".join(map(str, s)) + f":{w}"
                               for s, w in self.distribution.entries]
        return doc

    def modes(self) -> list[Mode]:
        return [BASELINE, MORPHLUX] + [ici(f) for f in self.ici_fractions]


# -- fill and churn protocols -------------------------------------------------

def fill_cluster(cluster: Cluster, dist: SliceDistribution, rng: Random,
                 mode: Mode = BASELINE, failure_limit: int = 50) -> list[Slice]:
    """Sample shapes and first-fit them until allocations keep failing."""
    allocated: list[Slice] = []
    failures = 0
    while failures < failure_limit:
        shape = dist.sample(rng)
        slc = allocate_contiguous(cluster, SliceRequest(shape, mode))
        if slc is None:
            failures += 1
        else:
            failures = 0
            allocated.append(slc)
    return allocated


def fill_even(cluster: Cluster, rng: Random,
              sizes: tuple[int, ...] = EXPERIMENT_SIZES) -> list[Slice]:
    """Spread the cluster's chips evenly across the slice sizes.

    Builds the full request multiset (an equal chip budget per size),
    shuffles it, and first-fits; stragglers that no longer fit are
    dropped.
    """
    budget = cluster.config.total_chips // len(sizes)
    requests: list[Dims] = []
    for size in sizes:
        requests.extend([CANONICAL_SHAPES[size]] * (budget // size))
    rng.shuffle(requests)
    allocated = []
    for shape in requests:
        slc = allocate_contiguous(cluster, SliceRequest(shape, BASELINE))
        if slc is not None:
            allocated.append(slc)
    return allocated


def churn(cluster: Cluster, fraction: float, rng: Random,
          by: str = "slices") -> list[int]:
    """Deallocate uniformly random victims without replacement.

    ``by='slices'`` removes ``fraction`` of the live slices; ``by='chips'``
    removes slices until at least ``fraction`` of all chips are free.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    if by == "slices":
        ids = sorted(cluster.slices)
        victims = rng.sample(ids, round(fraction * len(ids)))
        for sid in victims:
            deallocate(cluster, sid)
        return victims
    if by == "chips":
        target = fraction * cluster.config.total_chips
        ids = sorted(cluster.slices)
        rng.shuffle(ids)
        removed = []
        for sid in ids:
            if cluster.free_chips() >= target:
                break
            deallocate(cluster, sid)
            removed.append(sid)
        return removed
    raise ValueError(f"unknown churn mode {by!r}")


# -- fragmented allocation path ------------------------------------------------

@dataclass
class SolverTelemetry:
    solver_seconds: list[float] = field(default_factory=list)
    over_capacity: int = 0


def _fragmented_in_rack(cluster: Cluster, rack: Rack, request: SliceRequest,
                        telemetry: SolverTelemetry | None = None) -> Slice | None:
    cfg = cluster.config
    try:
        slots, edges, grid = request_graph(request.shape, cfg.server_dims)
    except ValueError:
        return None     # shape does not tile whole servers
    free = cluster.free_servers(rack)
    if len(free) < slots:
        return None
    problem = AssignmentProblem(
        slots=slots, slice_edges=edges, free_servers=tuple(free),
        graph=cluster.server_graph, loads=tuple(rack.fiber_loads),
        k_paths=cfg.k_paths)
    start = time.perf_counter()
    solution = solve_fragmented(problem)
    elapsed = time.perf_counter() - start
    if telemetry is not None:
        telemetry.solver_seconds.append(elapsed)
    if solution is None:
        return None
    mask = 0
    tpus = []
    links = []
    for srv in solution.mapping:
        mask |= cluster.server_graph.chip_masks[srv]
        tpus.extend(server_tpus(cluster, rack.id, srv))
        links.extend(server_internal_links(cluster, rack.id, srv))
    slc = Slice(
        id=cluster.new_slice_id(), rack=rack.id, shape=request.shape,
        tpus=tuple(tpus), links=tuple(links), mode=request.mode,
        fragmented=True, mask=mask, servers=solution.mapping, slot_shape=grid)
    rack.free_mask &= ~mask
    cluster.slices[slc.id] = slc
    realize_slice(cluster, slc, solution, strict=False)
    if telemetry is not None and not check_capacity(
            solution, cfg.fibers_per_server_pair).ok:
        telemetry.over_capacity += 1
    return slc


def allocate_flexible(cluster: Cluster, shape: Dims,
                      telemetry: SolverTelemetry | None = None
                      ) -> tuple[Slice | None, bool]:
    """Redirection-capable allocation: contiguous if possible, else fragmented.

    Scans racks in ascending id; within a rack a contiguous block is
    preferred and fragmented placement is the fallback. Returns the slice
    and whether the fragmented path was used.
    """
    request = SliceRequest(shape, MORPHLUX)
    size = request.size
    for rack in cluster.racks:
        if rack.free_count < size:
            continue
        slc = allocate_contiguous(cluster, request, rack_ids=[rack.id])
        if slc is not None:
            realize_slice(cluster, slc)
            return slc, False
        slc = _fragmented_in_rack(cluster, rack, request, telemetry)
        if slc is not None:
            return slc, True
    return None, False


# -- results ------------------------------------------------------------------

@dataclass
class ExperimentResult:
    """Rows plus a summary, reproducible byte-for-byte from (config, seed)."""

    experiment: str
    seed: int
    config: dict
    columns: tuple[str, ...]
    rows: list[tuple]
    summary: dict = field(default_factory=dict)

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        writer.writerows(self.rows)
        return buf.getvalue()

    def rows_json_text(self) -> str:
        return json.dumps({"columns": list(self.columns),
                           "rows": [list(r) for r in self.rows]},
                          indent=2, sort_keys=True)

    def summary_json_text(self) -> str:
        return json.dumps({"experiment": self.experiment, "seed": self.seed,
                           "config": self.config, "summary": self.summary},
                          indent=2, sort_keys=True, default=str)

    def write(self, outdir: str | Path, fmt: str = "csv") -> list[Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        paths = []
        if fmt == "csv":
            rows_path = outdir / f"{self.experiment}_rows.csv"
            rows_path.write_text(self.csv_text())
        else:
            rows_path = outdir / f"{self.experiment}_rows.json"
            rows_path.write_text(self.rows_json_text())
        paths.append(rows_path)
        summary_path = outdir / f"{self.experiment}_summary.json"
        summary_path.write_text(self.summary_json_text())
        paths.append(summary_path)
        return paths


def _trial_rng(seed: int, trial: int) -> Random:
    return Random(seed * 1_000_003 + trial)


def _used_ports_per_chip(shape: Dims, rack_dims: Dims, mode: Mode,
                         ports: int) -> int:
    if _prod(shape) == 1:
        return 0
    if mode.kind in ("morphlux", "ici"):
        return ports
    usable, _ = usable_dims(shape, rack_dims)
    per_dim = ports // 3
    return per_dim * len(usable) if usable else per_dim


# -- experiment drivers ---------------------------------------------------------

def _experiment_e1(config: SimConfig, seed: int) -> ExperimentResult:
    rows = []
    for trial in range(config.trials):
        cluster = build_cluster(config.cluster)
        rng = _trial_rng(seed, trial)
        fill_cluster(cluster, config.distribution, rng,
                     failure_limit=config.fill_failure_limit)
        churn(cluster, config.churn_fraction, rng, by="slices")
        for rack in cluster.racks:
            total_free = rack.free_count
            largest = largest_free_block(rack)
            rows.append((trial, rack.id, total_free, largest,
                         fragmentation_index(rack)))
    indexes = [r[4] for r in rows]
    summary = {
        "max_fragmentation_index": max(indexes),
        "mean_fragmentation_index": sum(indexes) / len(indexes),
        "racks": len(rows),
    }
    return ExperimentResult("e1", seed, config.to_dict(),
                            ("trial", "rack", "free_chips", "largest_block",
                             "fragmentation_index"), rows, summary)


def _experiment_e2(config: SimConfig, seed: int) -> ExperimentResult:
    rows = []
    modes = config.modes()
    cfg = config.cluster
    for trial in range(config.trials):
        cluster = build_cluster(cfg)
        rng = _trial_rng(seed, trial)
        fill_cluster(cluster, config.distribution, rng,
                     failure_limit=config.fill_failure_limit)
        by_rack: dict[int, list[Slice]] = {r.id: [] for r in cluster.racks}
        for slc in cluster.slices.values():
            by_rack[slc.rack].append(slc)
        for rack in cluster.racks:
            slices = by_rack[rack.id]
            chips = sum(s.size for s in slices)
            for mode in modes:
                used = sum(_used_ports_per_chip(s.shape, cfg.rack_dims, mode,
                                                cfg.ports_per_tpu) * s.size
                           for s in slices)
                total = cfg.ports_per_tpu * chips
                bw = (sum(usable_dims(s.shape, cfg.rack_dims, mode)[1] * s.size
                          for s in slices) / chips) if chips else 0.0
                rows.append((trial, rack.id, mode.label, used, total, bw))
    util = {}
    for mode in modes:
        pairs = [(r[3], r[4]) for r in rows if r[2] == mode.label and r[4] > 0]
        util[mode.label] = {
            "min_utilization": min(u / t for u, t in pairs),
            "mean_utilization": sum(u / t for u, t in pairs) / len(pairs),
        }
    summary = {"port_utilization": util, "rack_states": config.trials * cfg.racks_count}
    return ExperimentResult("e2", seed, config.to_dict(),
                            ("trial", "rack", "mode", "ports_used",
                             "ports_total", "bw_fraction"), rows, summary)


def _e3_streams(free_chips: int) -> dict[str, list[int]]:
    only32 = [32] * (free_chips // 32)
    mixed: list[int] = []
    total = 0
    while total < free_chips:
        size = 32 if len(mixed) % 2 == 0 else 16
        mixed.append(size)
        total += size
    return {"32": only32, "16_32": mixed}


def _experiment_e3(config: SimConfig, seed: int) -> ExperimentResult:
    rows = []
    telemetry = SolverTelemetry()
    for trial in range(config.trials):
        base = build_cluster(config.cluster)
        rng = _trial_rng(seed, trial)
        fill_even(base, rng)
        churn(base, config.free_target, rng, by="chips")
        streams = _e3_streams(base.free_chips())
        for stream, sizes in streams.items():
            for label in ("baseline", "sipac", "morphlux", "oracle"):
                successes = 0
                fragmented = 0
                if label == "oracle":
                    rack_free = [r.free_count for r in base.racks]
                    for size in sizes:
                        for i, f in enumerate(rack_free):
                            if f >= size:
                                rack_free[i] -= size
                                successes += 1
                                break
                else:
                    cluster = copy.deepcopy(base)
                    for size in sizes:
                        shape = CANONICAL_SHAPES[size]
                        if label == "morphlux":
                            slc, used_frag = allocate_flexible(cluster, shape,
                                                               telemetry)
                            if slc is not None:
                                successes += 1
                                fragmented += used_frag
                        else:   # baseline and the sequential-contiguous baseline
                            slc = allocate_contiguous(
                                cluster, SliceRequest(shape, BASELINE))
                            if slc is not None:
                                successes += 1
                rows.append((trial, stream, label, len(sizes), successes,
                             fragmented))
    fractions: dict[str, dict[str, float]] = {}
    for stream in ("32", "16_32"):
        fractions[stream] = {}
        for label in ("baseline", "sipac", "morphlux", "oracle"):
            got = [(r[4], r[3]) for r in rows if r[1] == stream and r[2] == label]
            total_req = sum(n for _, n in got)
            fractions[stream][label] = (sum(s for s, _ in got) / total_req
                                        if total_req else 0.0)
    summary = {
        "success_fraction": fractions,
        "fragmented_allocations": sum(r[5] for r in rows),
        "over_capacity_allocations": telemetry.over_capacity,
        "solver_calls": len(telemetry.solver_seconds),
    }
    result = ExperimentResult("e3", seed, config.to_dict(),
                              ("trial", "stream", "mode", "requests",
                               "successes", "frag_successes"), rows, summary)
    result.solver_seconds = telemetry.solver_seconds   # timing is not part of the bytes
    return result


def _experiment_e4(config: SimConfig, seed: int) -> ExperimentResult:
    cluster = build_cluster(config.cluster)
    rng = _trial_rng(seed, 0)
    fill_cluster(cluster, config.distribution, rng,
                 failure_limit=config.fill_failure_limit)
    params = CostParams.from_config(config.cluster)
    modes = config.modes()
    rows = []
    rack_throughput = {m.label: {r.id: 0.0 for r in cluster.racks} for m in modes}
    for sid in sorted(cluster.slices):
        slc = cluster.slices[sid]
        per_mode = {}
        for mode in modes:
            per_mode[mode.label] = train_iter_time(
                config.gradient_bytes, config.compute_seconds, slc.shape,
                config.cluster.rack_dims, mode, params)
        base_t = per_mode["baseline"]
        for mode in modes:
            t = per_mode[mode.label]
            rows.append((sid, slc.size, mode.label, t, base_t / t))
            rack_throughput[mode.label][slc.rack] += 1.0 / t
    improvements = []
    for rack in cluster.racks:
        base = rack_throughput["baseline"][rack.id]
        lux = rack_throughput["morphlux"][rack.id]
        if base > 0:
            improvements.append(lux / base)
    improvements.sort()
    summary = {
        "cluster_throughput": {label: sum(per.values())
                               for label, per in rack_throughput.items()},
        "median_rack_speedup_morphlux": improvements[len(improvements) // 2]
                                        if improvements else None,
        "max_rack_speedup_morphlux": improvements[-1] if improvements else None,
    }
    return ExperimentResult("e4", seed, config.to_dict(),
                            ("slice", "size", "mode", "iter_seconds",
                             "speedup_vs_baseline"), rows, summary)


_DRIVERS = {
    "e1": _experiment_e1,
    "e2": _experiment_e2,
    "e3": _experiment_e3,
    "e4": _experiment_e4,
}


def run_experiment(experiment: str, config: SimConfig, seed: int) -> ExperimentResult:
    """Run one of the drivers; deterministic for fixed (config, seed)."""
    experiment = experiment.lower()
    if experiment not in _DRIVERS:
        raise ValueError(f"unknown experiment {experiment!r}")
    return _DRIVERS[experiment](config, seed)
