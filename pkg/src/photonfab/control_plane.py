"""Translate logical slices into physical fabric configuration.

Covers SerDes port apportionment across communication groups, circuit
realization (bandwidth-redirected rings for contiguous slices, fiber-path
circuits for fragmented ones) with loss-budget and capacity accounting,
the reconfiguration-time model, and chip-failure patching.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

from .alloc_contiguous import _block_links, allocate_contiguous, deallocate
from .frag_alloc import (AssignmentProblem, AssignmentSolution, request_graph,
                         slot_coords, solve_fragmented)
from .slicemodel import Slice, SliceRequest
from .topology import Cluster, Dims, TpuCoord, chip_index, chip_xyz


class LossBudgetError(ValueError):
    """A circuit's optical loss exceeds the configured budget."""

    def __init__(self, circuit: "Circuit", budget: float):
        self.circuit = circuit
        self.budget = budget
        super().__init__(
            f"circuit {circuit.endpoints} loses {circuit.loss_db:.2f} dB, "
            f"budget is {budget:.2f} dB")


class CapacityError(ValueError):
    """Realizing the circuits would oversubscribe fiber bundles."""

    def __init__(self, edges: tuple[int, ...]):
        self.edges = edges
        super().__init__(f"fiber capacity exceeded on edges {list(edges)}")


@dataclass(frozen=True)
class PortAssignment:
    """Per-group SerDes port counts for one chip; sums to the port count."""

    counts: tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.counts)


def assign_ports(ports: int, requirements: list[float]) -> PortAssignment:
    """Apportion a chip's ports over group bandwidth requirements.

    Largest-remainder apportionment with deterministic index tie-breaks.
    Zero-requirement groups get zero ports; every positive-requirement
    group gets at least one.
    """
    if any(w < 0 for w in requirements):
        raise ValueError("bandwidth requirements must be nonnegative")
    positive = [i for i, w in enumerate(requirements) if w > 0]
    if not positive:
        raise ValueError("at least one group must have a positive requirement")
    if len(positive) > ports:
        raise ValueError(
            f"{len(positive)} groups with positive requirement exceed {ports} ports")
    total = sum(requirements)
    quotas = [ports * w / total for w in requirements]
    counts = [int(q) for q in quotas]
    remainders = sorted(range(len(requirements)),
                        key=lambda i: (-(quotas[i] - counts[i]), i))
    short = ports - sum(counts)
    for i in remainders[:short]:
        counts[i] += 1
    # enforce the minimum for starved positive groups
    for i in positive:
        while counts[i] == 0:
            donor = max((j for j in positive if counts[j] > 1),
                        key=lambda j: (counts[j], -j))
            counts[donor] -= 1
            counts[i] += 1
    return PortAssignment(tuple(counts))


@dataclass(frozen=True)
class Circuit:
    """One programmed optical circuit.

    ``path`` is the fiber-edge id sequence for inter-server circuits and
    empty for redirected circuits that stay on a slice's own static links.
    ``fiber_units`` is what the circuit occupies on each traversed edge.
    """

    endpoints: tuple          # chip pair (contiguous) or slot pair (fragmented)
    path: tuple[int, ...]
    crossings: int
    length_cm: float
    ports: int
    loss_db: float
    fiber_units: int = 4


def circuit_loss(crossings: int, length_cm: float, loss_per_crossing_db: float,
                 waveguide_loss_db_per_cm: float) -> float:
    return crossings * loss_per_crossing_db + length_cm * waveguide_loss_db_per_cm


def reconfig_time(circuit_changes: int, parallel: bool,
                  reconfig_delay: float = 3.7e-6) -> float:
    """Seconds to reprogram switches for a batch of circuit changes."""
    if circuit_changes < 0:
        raise ValueError("circuit_changes must be nonnegative")
    if circuit_changes == 0:
        return 0.0
    return reconfig_delay if parallel else circuit_changes * reconfig_delay


def _snake_order(shape: Dims) -> list[Dims]:
    """Boustrophedon visit order: consecutive chips are torus neighbors."""
    sx, sy, sz = shape
    out = []
    for z in range(sz):
        ys = range(sy) if z % 2 == 0 else range(sy - 1, -1, -1)
        for y in ys:
            xs = range(sx) if (y + z) % 2 == 0 else range(sx - 1, -1, -1)
            for x in xs:
                out.append((x, y, z))
    return out


def _server_of(xyz: Dims, server_dims: Dims) -> Dims:
    return tuple(c // d for c, d in zip(xyz, server_dims))


def _manhattan(a: Dims, b: Dims) -> int:
    return sum(abs(x - y) for x, y in zip(a, b))


def _make_circuit(cluster: Cluster, endpoints, path: tuple[int, ...],
                  crossings: int, length_cm: float, ports: int) -> Circuit:
    cfg = cluster.config
    loss = circuit_loss(crossings, length_cm, cfg.loss_per_crossing_db,
                        cfg.waveguide_loss_db_per_cm)
    circuit = Circuit(endpoints, path, crossings, length_cm, ports, loss)
    if loss > cfg.loss_budget_db:
        raise LossBudgetError(circuit, cfg.loss_budget_db)
    return circuit


def _redirected_ring_circuits(cluster: Cluster, slc: Slice) -> list[Circuit]:
    """Full-bandwidth ring over a contiguous slice's own chips.

    Each chip splits its ports between its two ring neighbors; a two-chip
    ring pours every port into the single connection.
    """
    cfg = cluster.config
    ports = cfg.ports_per_tpu
    if slc.size < 2:
        return []
    anchor = slc.anchor or (0, 0, 0)
    order = [tuple(a + d for a, d in zip(anchor, pos))
             for pos in _snake_order(slc.shape)]
    if slc.size == 2:
        pairs = [(order[0], order[1])]
        per_link = ports
    else:
        pairs = [(order[i], order[(i + 1) % len(order)]) for i in range(len(order))]
        per_link = ports // 2
    circuits = []
    for a, b in pairs:
        crossings = _manhattan(_server_of(a, cfg.server_dims),
                               _server_of(b, cfg.server_dims))
        length = float(_manhattan(a, b))
        ends = (TpuCoord(slc.rack, *a), TpuCoord(slc.rack, *b))
        circuits.append(_make_circuit(cluster, ends, (), crossings, length, per_link))
    return circuits


def _fragmented_circuits(cluster: Cluster, slc: Slice,
                         solution: AssignmentSolution) -> list[Circuit]:
    cfg = cluster.config
    _, edges, grid = request_graph(slc.shape, cfg.server_dims)
    budget = cfg.chips_per_server * cfg.ports_per_tpu
    degree = [0] * len(solution.mapping)
    for a, b in edges:
        degree[a] += 1
        degree[b] += 1
    circuits = []
    for (a, b), path in zip(edges, solution.paths):
        ports = min(budget // max(degree[a], 1), budget // max(degree[b], 1))
        circuits.append(_make_circuit(cluster, (a, b), path,
                                      crossings=len(path),
                                      length_cm=float(len(path)),
                                      ports=ports))
    return circuits


def realize_slice(cluster: Cluster, slc: Slice,
                  solution: AssignmentSolution | None = None, *,
                  strict: bool = True) -> tuple[Circuit, ...]:
    """Program the circuits a slice needs; returns them and records them.

    Contiguous morphlux slices get redirected ring circuits over their own
    links; fragmented slices get one circuit per request edge along the
    solver's fiber paths, charging ``fiber_units`` on every traversed
    edge. Baseline and ici slices keep the static wiring and need none.
    Raises on loss-budget violations always, and on fiber over-capacity
    when ``strict`` (non-strict callers audit capacity themselves).
    """
    if slc.mode.kind != "morphlux":
        return ()
    if slc.fragmented:
        if solution is None:
            raise ValueError("fragmented slice needs an assignment solution")
        circuits = _fragmented_circuits(cluster, slc, solution)
        rack = cluster.racks[slc.rack]
        pending = rack.fiber_loads[:]
        for c in circuits:
            for eid in c.path:
                pending[eid] += c.fiber_units
        over = tuple(eid for eid, load in enumerate(pending)
                     if load > cluster.server_graph.edges[eid].capacity)
        if strict and over:
            raise CapacityError(over)
        rack.fiber_loads[:] = pending
    else:
        circuits = _redirected_ring_circuits(cluster, slc)
    slc.circuits.extend(circuits)
    return tuple(circuits)


def circuits_to_json(circuits) -> list[dict]:
    """Inspection form of circuit programs: path, ports, loss per circuit."""
    out = []
    for c in circuits:
        ends = [list(e) if isinstance(e, tuple) else e for e in c.endpoints]
        out.append({
            "endpoints": ends,
            "path": list(c.path),
            "crossings": c.crossings,
            "length_cm": c.length_cm,
            "ports": c.ports,
            "loss_db": round(c.loss_db, 6),
        })
    return out


@dataclass(frozen=True)
class PatchReport:
    """Outcome of recovering a slice from a chip failure."""

    kind: str                      # "patched" | "migrated"
    failed: TpuCoord
    replacement_server: int | None
    new_slice_id: int | None
    circuits_changed: int
    objective: int | None
    solver_seconds: float
    reconfig_seconds: float

    @property
    def recovery_seconds(self) -> float:
        return self.solver_seconds + self.reconfig_seconds


def _slot_mapping(cluster: Cluster, slc: Slice) -> tuple[tuple[int, ...], Dims] | None:
    """Current slot-to-server mapping of a slice, if server-aligned."""
    cfg = cluster.config
    if slc.fragmented and slc.servers is not None:
        return slc.servers, slc.slot_shape
    try:
        _, _, grid = request_graph(slc.shape, cfg.server_dims)
    except ValueError:
        return None
    anchor = slc.anchor or (0, 0, 0)
    if any(a % d for a, d in zip(anchor, cfg.server_dims)):
        return None
    sgrid = cluster.server_graph.grid
    servers = []
    for slot in range(grid[0] * grid[1] * grid[2]):
        gx, gy, gz = slot_coords(grid, slot)
        sx = anchor[0] // cfg.server_dims[0] + gx
        sy = anchor[1] // cfg.server_dims[1] + gy
        sz = anchor[2] // cfg.server_dims[2] + gz
        servers.append(chip_index(sgrid, sx, sy, sz))
    return tuple(servers), grid


def server_tpus(cluster: Cluster, rack_id: int, server: int) -> list[TpuCoord]:
    mask = cluster.server_graph.chip_masks[server]
    dims = cluster.config.rack_dims
    out = []
    i = 0
    while mask:
        if mask & 1:
            out.append(TpuCoord(rack_id, *chip_xyz(dims, i)))
        mask >>= 1
        i += 1
    return out


def handle_failure(cluster: Cluster, slc: Slice, failed: TpuCoord, *,
                   parallel: bool = True) -> PatchReport | None:
    """Recover a slice from a failed chip; None when unrecoverable.

    Morphlux slices are patched in place: the failed chip's server slot is
    remapped onto a fully-free server in the same rack, circuits to its
    request-graph neighbors are re-solved and spliced, and the modeled
    recovery time is solver wall time plus switch reconfiguration.
    Baseline and ici slices follow the migration policy instead: the whole
    slice moves to a contiguous block in a different rack.
    """
    if failed not in slc.tpus:
        raise ValueError(f"{failed} is not part of slice {slc.id}")
    cfg = cluster.config
    rack = cluster.racks[slc.rack]
    bit = 1 << chip_index(cfg.rack_dims, failed.x, failed.y, failed.z)
    rack.dead_mask |= bit

    aligned = _slot_mapping(cluster, slc) if slc.mode.kind == "morphlux" else None
    if aligned is None:
        target = allocate_contiguous(cluster, SliceRequest(slc.shape, slc.mode),
                                     exclude_racks=frozenset({slc.rack}))
        if target is None:
            return None
        deallocate(cluster, slc.id)
        return PatchReport(kind="migrated", failed=failed,
                           replacement_server=None, new_slice_id=target.id,
                           circuits_changed=0, objective=None,
                           solver_seconds=0.0, reconfig_seconds=0.0)

    servers, grid = aligned
    _, edges, _ = request_graph(slc.shape, cfg.server_dims)
    failed_server_pos = _server_of((failed.x, failed.y, failed.z), cfg.server_dims)
    failed_server = chip_index(cluster.server_graph.grid, *failed_server_pos)
    failed_slot = servers.index(failed_server)

    free = cluster.free_servers(rack)
    if not free:
        return None

    # release the failed slot's circuits before re-solving
    removed = [c for c in slc.circuits
               if c.path and failed_slot in c.endpoints]
    for c in removed:
        for eid in c.path:
            rack.fiber_loads[eid] -= c.fiber_units
        slc.circuits.remove(c)

    slot_edges = tuple(e for e in edges if failed_slot in e)
    pinned = tuple((s, srv) for s, srv in enumerate(servers) if s != failed_slot)
    problem = AssignmentProblem(
        slots=len(servers), slice_edges=slot_edges, free_servers=tuple(free),
        graph=cluster.server_graph, loads=tuple(rack.fiber_loads),
        k_paths=cfg.k_paths, pinned=pinned)
    start = time.perf_counter()
    solution = solve_fragmented(problem)
    solver_seconds = time.perf_counter() - start
    if solution is None:    # pinned endpoints are always connected in a rack
        for c in removed:   # restore what we tore down
            for eid in c.path:
                rack.fiber_loads[eid] += c.fiber_units
            slc.circuits.append(c)
        return None

    new_server = solution.mapping[failed_slot]
    old_mask = cluster.server_graph.chip_masks[failed_server]
    new_mask = cluster.server_graph.chip_masks[new_server]
    rack.free_mask |= (old_mask & slc.mask) & ~rack.dead_mask
    rack.free_mask &= ~new_mask
    slc.mask = (slc.mask & ~old_mask) | new_mask

    new_servers = list(servers)
    new_servers[failed_slot] = new_server
    slc.servers = tuple(new_servers)
    slc.slot_shape = grid
    slc.fragmented = True
    slc.tpus = tuple(tpu for srv in new_servers
                     for tpu in server_tpus(cluster, slc.rack, srv))
    slc.links = tuple(link for srv in new_servers
                      for link in server_internal_links(cluster, slc.rack, srv))

    added = []
    budget = cfg.chips_per_server * cfg.ports_per_tpu
    degree = {s: 0 for s in range(len(servers))}
    for a, b in edges:
        degree[a] += 1
        degree[b] += 1
    for (a, b), path in zip(slot_edges, solution.paths):
        ports = min(budget // max(degree[a], 1), budget // max(degree[b], 1))
        circuit = _make_circuit(cluster, (a, b), path, len(path),
                                float(len(path)), ports)
        for eid in path:
            rack.fiber_loads[eid] += circuit.fiber_units
        added.append(circuit)
    slc.circuits.extend(added)

    changes = len(removed) + len(added)
    reconfig_seconds = reconfig_time(changes, parallel, cfg.reconfig_delay)
    return PatchReport(kind="patched", failed=failed,
                       replacement_server=new_server, new_slice_id=None,
                       circuits_changed=changes, objective=solution.objective,
                       solver_seconds=solver_seconds,
                       reconfig_seconds=reconfig_seconds)


def server_internal_links(cluster: Cluster, rack_id: int, server: int):
    cfg = cluster.config
    grid = cluster.server_graph.grid
    sx, sy, sz = chip_xyz(grid, server)
    anchor = (sx * cfg.server_dims[0], sy * cfg.server_dims[1], sz * cfg.server_dims[2])
    return _block_links(cfg.rack_dims, rack_id, cfg.server_dims, anchor)
