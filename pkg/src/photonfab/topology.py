"""Physical fabric model for a direct-connect accelerator datacenter.

A cluster is a set of racks, each rack a fixed 3D torus of accelerator
chips. Chips are grouped into multi-chip servers; every chip link that
crosses a server boundary is carried by a fiber bundle between the two
servers. The per-rack server graph (the quotient of the chip torus under
server grouping) is what circuits for fragmented slices are routed over.

Rack occupancy is kept as a bitmask (one bit per chip), which makes
block-fit tests and fragmentation scans cheap.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Iterator, NamedTuple

Dims = tuple[int, int, int]


class ConfigurationError(ValueError):
    """A cluster configuration violates its invariants."""


class Axis(IntEnum):
    X = 0
    Y = 1
    Z = 2


def _prod(dims) -> int:
    out = 1
    for d in dims:
        out *= d
    return out


@dataclass(frozen=True)
class ClusterConfig:
    """Static description of the fabric.

    Bandwidth is per port (a chip has ``ports_per_tpu`` of them, two per
    torus dimension), losses are the per-element optical budget terms, and
    ``fibers_per_server_pair`` is the bundle capacity in fiber units
    between any pair of adjacent servers.
    """

    racks_count: int = 64
    rack_dims: Dims = (4, 4, 4)
    server_dims: Dims = (2, 2, 1)
    ports_per_tpu: int = 6
    fibers_per_server_pair: int = 4
    link_bandwidth: float = 50e9          # bytes/second per port
    alpha: float = 1e-6                   # seconds of software overhead per ring step
    reconfig_delay: float = 3.7e-6        # seconds to reprogram a switch batch
    loss_per_crossing_db: float = 0.25
    waveguide_loss_db_per_cm: float = 0.4
    loss_budget_db: float = 10.0
    k_paths: int = 4

    def __post_init__(self):
        if self.racks_count < 1:
            raise ConfigurationError("racks_count must be >= 1")
        if any(d < 1 for d in self.rack_dims) or any(d < 1 for d in self.server_dims):
            raise ConfigurationError("all extents must be >= 1")
        if any(r % s for r, s in zip(self.rack_dims, self.server_dims)):
            raise ConfigurationError(
                f"server_dims {self.server_dims} must divide rack_dims {self.rack_dims}"
            )
        if self.ports_per_tpu < 6 or self.ports_per_tpu % 6:
            raise ConfigurationError("ports_per_tpu must be a positive multiple of 6 "
                                     "(two ports per torus dimension)")
        if self.fibers_per_server_pair < 1:
            raise ConfigurationError("fibers_per_server_pair must be >= 1")
        if self.k_paths < 1:
            raise ConfigurationError("k_paths must be >= 1")

    @property
    def chips_per_rack(self) -> int:
        return _prod(self.rack_dims)

    @property
    def chips_per_server(self) -> int:
        return _prod(self.server_dims)

    @property
    def servers_per_rack(self) -> int:
        return self.chips_per_rack // self.chips_per_server

    @property
    def server_grid(self) -> Dims:
        r, s = self.rack_dims, self.server_dims
        return (r[0] // s[0], r[1] // s[1], r[2] // s[2])

    @property
    def total_chips(self) -> int:
        return self.racks_count * self.chips_per_rack

    @property
    def egress_bandwidth(self) -> float:
        """Full escape bandwidth of one chip, all ports combined."""
        return self.ports_per_tpu * self.link_bandwidth


class TpuCoord(NamedTuple):
    rack: int
    x: int
    y: int
    z: int

    @property
    def xyz(self) -> Dims:
        return (self.x, self.y, self.z)


@dataclass(frozen=True)
class LinkEdge:
    """A direct chip-to-chip link along one torus dimension.

    ``doubled`` marks the extent-2 degeneracy where the +1 and -1 links of
    a dimension land on the same neighbor; the merged edge stands for both
    physical links.
    """

    a: TpuCoord
    b: TpuCoord
    axis: Axis
    wraparound: bool
    doubled: bool = False


# -- chip/bitmask helpers ----------------------------------------------------

def chip_index(dims: Dims, x: int, y: int, z: int) -> int:
    return x + dims[0] * (y + dims[1] * z)


def chip_xyz(dims: Dims, index: int) -> Dims:
    nx, ny, _ = dims
    x = index % nx
    y = (index // nx) % ny
    z = index // (nx * ny)
    return (x, y, z)


def full_mask(dims: Dims) -> int:
    return (1 << _prod(dims)) - 1


def mask_coords(dims: Dims, mask: int) -> Iterator[Dims]:
    i = 0
    while mask:
        if mask & 1:
            yield chip_xyz(dims, i)
        mask >>= 1
        i += 1


def block_mask(dims: Dims, anchor: Dims, shape: Dims) -> int:
    mask = 0
    ax, ay, az = anchor
    sx, sy, sz = shape
    for z in range(az, az + sz):
        for y in range(ay, ay + sy):
            for x in range(ax, ax + sx):
                mask |= 1 << chip_index(dims, x, y, z)
    return mask


# -- server graph ------------------------------------------------------------

@dataclass(frozen=True)
class FiberEdge:
    id: int
    u: int
    v: int
    capacity: int
    link_count: int = 1   # chip-level links carried by this bundle


class ServerGraph:
    """Undirected server-level graph with fiber bundles as edges.

    Deterministic by construction: servers and edges are identified by
    dense integer ids, adjacency lists are sorted, and path enumeration is
    a pure function of the graph.
    """

    def __init__(self, num_servers: int, edges: list[FiberEdge],
                 grid: Dims | None = None,
                 positions: dict[int, Dims] | None = None,
                 chip_masks: tuple[int, ...] | None = None):
        self.num_servers = num_servers
        self.edges: tuple[FiberEdge, ...] = tuple(edges)
        self.grid = grid
        self.positions = positions
        self.chip_masks = chip_masks
        adj: dict[int, list[tuple[int, int]]] = {s: [] for s in range(num_servers)}
        for e in self.edges:
            adj[e.u].append((e.v, e.id))
            adj[e.v].append((e.u, e.id))
        self.adj = {s: tuple(sorted(nbrs)) for s, nbrs in adj.items()}
        self._edge_by_pair = {(min(e.u, e.v), max(e.u, e.v)): e for e in self.edges}
        self._path_cache: dict[tuple[int, int, int], tuple[tuple[int, ...], ...]] = {}

    @classmethod
    def from_pairs(cls, num_servers: int, pairs: list[tuple[int, int]],
                   capacity: int = 4) -> "ServerGraph":
        edges = [FiberEdge(i, min(u, v), max(u, v), capacity)
                 for i, (u, v) in enumerate(pairs)]
        return cls(num_servers, edges)

    @classmethod
    def quotient(cls, rack_dims: Dims, server_dims: Dims, capacity: int) -> "ServerGraph":
        """Server graph induced by grouping the chip torus into servers."""
        grid = tuple(r // s for r, s in zip(rack_dims, server_dims))
        num = _prod(grid)
        positions = {chip_index(grid, x, y, z): (x, y, z)
                     for z in range(grid[2]) for y in range(grid[1]) for x in range(grid[0])}

        def server_of(x: int, y: int, z: int) -> int:
            return chip_index(grid, x // server_dims[0], y // server_dims[1], z // server_dims[2])

        counts: dict[tuple[int, int], int] = {}
        nx, ny, nz = rack_dims
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    here = server_of(x, y, z)
                    for axis, ext in enumerate(rack_dims):
                        if ext == 1:
                            continue
                        step = [x, y, z]
                        step[axis] = (step[axis] + 1) % ext
                        there = server_of(*step)
                        if there != here:
                            key = (min(here, there), max(here, there))
                            counts[key] = counts.get(key, 0) + 1
        edges = [FiberEdge(i, u, v, capacity, link_count=counts[(u, v)])
                 for i, (u, v) in enumerate(sorted(counts))]

        masks = []
        for sidx in range(num):
            sx, sy, sz = chip_xyz(grid, sidx)
            anchor = (sx * server_dims[0], sy * server_dims[1], sz * server_dims[2])
            masks.append(block_mask(rack_dims, anchor, server_dims))
        return cls(num, edges, grid=tuple(grid), positions=positions,
                   chip_masks=tuple(masks))

    def edge_between(self, u: int, v: int) -> FiberEdge | None:
        return self._edge_by_pair.get((min(u, v), max(u, v)))

    def paths(self, u: int, v: int, k: int) -> tuple[tuple[int, ...], ...]:
        a, b = min(u, v), max(u, v)
        key = (a, b, k)
        if key not in self._path_cache:
            self._path_cache[key] = enumerate_paths(self, a, b, k)
        return self._path_cache[key]


def _bfs_distances(graph: ServerGraph, target: int) -> dict[int, int]:
    dist = {target: 0}
    queue = deque([target])
    while queue:
        node = queue.popleft()
        for nbr, _ in graph.adj[node]:
            if nbr not in dist:
                dist[nbr] = dist[node] + 1
                queue.append(nbr)
    return dist


def enumerate_paths(graph: ServerGraph, u: int, v: int,
                    k: int) -> tuple[tuple[int, ...], ...]:
    """Up to ``k`` loop-free paths from ``u`` to ``v`` as edge-id tuples.

    Sorted by hop count, ties broken by lexicographic edge-id order.
    Deterministic for a fixed graph; returns an empty tuple when ``u`` and
    ``v`` are disconnected.
    """
    if u == v:
        raise ValueError("path endpoints must differ")
    if k < 1:
        raise ValueError("k must be >= 1")
    dist = _bfs_distances(graph, v)
    if u not in dist:
        return ()
    max_len = graph.num_servers - 1
    cutoff = dist[u]
    while True:
        found: list[tuple[int, ...]] = []
        _collect_paths(graph, u, v, dist, cutoff, [u], [], found)
        if len(found) >= k or cutoff >= max_len:
            break
        cutoff += 1
    found.sort(key=lambda p: (len(p), p))
    return tuple(found[:k])


def _collect_paths(graph, node, target, dist, cutoff, visited, edges, out):
    if node == target:
        out.append(tuple(edges))
        return
    if len(edges) >= cutoff:
        return
    budget = cutoff - len(edges)
    for nbr, eid in graph.adj[node]:
        if nbr in visited:
            continue
        if dist.get(nbr, budget + 1) > budget - 1:
            continue
        visited.append(nbr)
        edges.append(eid)
        _collect_paths(graph, nbr, target, dist, cutoff, visited, edges, out)
        edges.pop()
        visited.pop()


# -- cluster state -----------------------------------------------------------

@dataclass
class Rack:
    id: int
    dims: Dims
    free_mask: int
    dead_mask: int = 0
    fiber_loads: list[int] = field(default_factory=list)

    @property
    def free_count(self) -> int:
        return self.free_mask.bit_count()


class Cluster:
    """Mutable fabric state: rack occupancy, fiber loads, live slices.

    Single-writer; copy the whole cluster for independent trials.
    """

    def __init__(self, config: ClusterConfig):
        self.config = config
        self.server_graph = ServerGraph.quotient(
            config.rack_dims, config.server_dims, config.fibers_per_server_pair)
        free = full_mask(config.rack_dims)
        nedges = len(self.server_graph.edges)
        self.racks = [Rack(i, config.rack_dims, free, 0, [0] * nedges)
                      for i in range(config.racks_count)]
        self.slices: dict[int, Any] = {}
        self._next_slice_id = 0

    def new_slice_id(self) -> int:
        sid = self._next_slice_id
        self._next_slice_id += 1
        return sid

    def free_chips(self) -> int:
        return sum(r.free_count for r in self.racks)

    def allocated_fraction(self) -> float:
        total = self.config.total_chips
        dead = sum(r.dead_mask.bit_count() for r in self.racks)
        return (total - self.free_chips() - dead) / total

    def free_servers(self, rack: Rack) -> list[int]:
        """Server ids in ``rack`` whose chips are all unallocated."""
        masks = self.server_graph.chip_masks
        if masks is None:
            raise ValueError("cluster server graph carries no chip masks")
        return [sid for sid, m in enumerate(masks) if rack.free_mask & m == m]


def build_cluster(config: ClusterConfig) -> Cluster:
    """Construct an all-free cluster from a validated configuration."""
    return Cluster(config)


def neighbors(cluster: Cluster, coord: TpuCoord) -> list[tuple[TpuCoord, LinkEdge]]:
    """Torus neighbors of a chip with their link annotations.

    Extent-2 dimensions return the coinciding +1/-1 neighbor once, as a
    doubled link. Extent-1 dimensions contribute no links.
    """
    dims = cluster.config.rack_dims
    if not (0 <= coord.rack < cluster.config.racks_count):
        raise ValueError(f"rack {coord.rack} out of range")
    if any(not 0 <= c < d for c, d in zip(coord.xyz, dims)):
        raise ValueError(f"coordinate {coord.xyz} outside rack dims {dims}")
    out = []
    for axis in Axis:
        ext = dims[axis]
        if ext == 1:
            continue
        if ext == 2:
            step = list(coord.xyz)
            step[axis] = (step[axis] + 1) % ext
            nbr = TpuCoord(coord.rack, *step)
            out.append((nbr, LinkEdge(coord, nbr, axis, wraparound=False, doubled=True)))
            continue
        for delta in (1, -1):
            step = list(coord.xyz)
            raw = step[axis] + delta
            step[axis] = raw % ext
            nbr = TpuCoord(coord.rack, *step)
            out.append((nbr, LinkEdge(coord, nbr, axis, wraparound=not 0 <= raw < ext)))
    return out
