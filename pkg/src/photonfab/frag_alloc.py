"""Exact solver for fragmented slice placement.

Maps the slots of a server-level slice request graph onto non-contiguous
free servers of a rack and selects one fiber path per request edge,
minimizing the maximum per-fiber load: existing fiber units on an edge
plus the units consumed by the new circuits crossing it. Solved by
branch-and-bound over slot assignments (servers explored in ascending
id), with an exact routing subproblem per mapping; pruning uses a
capacity-feasibility check on the edges decided so far, so the result is
provably optimal. Ties break to the lexicographically smallest mapping,
then the smallest path indices.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

from .topology import Dims, ServerGraph, chip_xyz, _prod

_BIG = 1 << 30
_MISS = object()


@dataclass(frozen=True)
class AssignmentProblem:
    """One placement instance: request graph, free servers, fiber state."""

    slots: int
    slice_edges: tuple[tuple[int, int], ...]
    free_servers: tuple[int, ...]
    graph: ServerGraph
    loads: tuple[int, ...]                       # existing fiber units per edge id
    k_paths: int = 4
    circuit_cost: int = 4                        # fiber units per new circuit
    pinned: tuple[tuple[int, int], ...] = ()     # (slot, server) fixed endpoints

    def __post_init__(self):
        if self.slots < 1:
            raise ValueError("need at least one slot")
        for a, b in self.slice_edges:
            if not (0 <= a < self.slots and 0 <= b < self.slots) or a == b:
                raise ValueError(f"bad slice edge ({a}, {b})")
        if len(self.loads) != len(self.graph.edges):
            raise ValueError("loads must cover every fiber edge")
        if any(b < 0 for b in self.loads):
            raise ValueError("existing loads must be nonnegative")
        servers = set(range(self.graph.num_servers))
        if not set(self.free_servers) <= servers:
            raise ValueError("free servers outside graph")
        pinned_slots = [s for s, _ in self.pinned]
        if len(set(pinned_slots)) != len(pinned_slots):
            raise ValueError("duplicate pinned slot")

    def paths(self, u: int, v: int) -> tuple[tuple[int, ...], ...]:
        return self.graph.paths(u, v, self.k_paths)


@dataclass(frozen=True)
class AssignmentSolution:
    mapping: tuple[int, ...]                 # slot -> server
    routes: tuple[int, ...]                  # per slice edge: index into its path set
    paths: tuple[tuple[int, ...], ...]       # per slice edge: resolved fiber edge ids
    objective: int                           # max per-edge fiber load
    edge_loads: tuple[int, ...]              # per fiber edge after new circuits


@dataclass(frozen=True)
class CapacityCheck:
    ok: bool
    over_edges: tuple[int, ...]


def check_capacity(solution: AssignmentSolution, capacity: int = 4) -> CapacityCheck:
    """OK iff no fiber edge exceeds its bundle capacity; lists offenders."""
    over = tuple(eid for eid, load in enumerate(solution.edge_loads) if load > capacity)
    return CapacityCheck(len(over) == 0, over)


class _Search:
    def __init__(self, problem: AssignmentProblem):
        self.p = problem
        self.base = list(problem.loads)
        self.floor = max(problem.loads, default=0)
        self.cost = problem.circuit_cost
        self.pinned = dict(problem.pinned)
        taken = set(self.pinned.values())
        self.free = tuple(s for s in sorted(set(problem.free_servers)) if s not in taken)
        self.unpinned = [s for s in range(problem.slots) if s not in self.pinned]
        # Edges become routable once their later endpoint (in assignment
        # order) is mapped; pinned endpoints count as already mapped.
        pos = {slot: i for i, slot in enumerate(self.unpinned)}
        self.trigger: dict[int, list[int]] = {i: [] for i in range(len(self.unpinned))}
        self.initial_edges: list[int] = []
        for eidx, (a, b) in enumerate(problem.slice_edges):
            pa, pb = pos.get(a, -1), pos.get(b, -1)
            when = max(pa, pb)
            if when < 0:
                self.initial_edges.append(eidx)
            else:
                self.trigger[when].append(eidx)
        self._dmin: dict[tuple[int, int], int] = {}
        self._bits: dict[tuple[int, ...], int] = {}
        self._opts_bits: dict[tuple, tuple] = {}
        # pack results keyed by (cap, sorted pair multiset); packing
        # feasibility only depends on which server pairs need a path, so
        # branches that assign the same pairs share one proof
        self._pack_memo: dict[tuple, dict | None] = {}

    def path_options(self, u: int, v: int) -> tuple[tuple[int, ...], ...]:
        return self.p.paths(u, v)

    def dmin(self, u: int, v: int) -> int:
        key = (min(u, v), max(u, v))
        if key not in self._dmin:
            opts = self.path_options(u, v)
            if not opts:
                self._dmin[key] = _BIG
            else:
                self._dmin[key] = min(max(self.base[e] + self.cost for e in path)
                                      for path in opts)
        return self._dmin[key]

    # -- routing subproblems ------------------------------------------------

    def bits(self, path: tuple[int, ...]) -> int:
        mask = self._bits.get(path)
        if mask is None:
            mask = 0
            for e in path:
                mask |= 1 << e
            self._bits[path] = mask
        return mask

    def opts_bits(self, opts: tuple) -> tuple:
        pairs = self._opts_bits.get(opts)
        if pairs is None:
            pairs = tuple((p, self.bits(p)) for p in opts)
            self._opts_bits[opts] = pairs
        return pairs

    def pack(self, opts_list: list, limit: int) -> list[tuple[int, ...]] | None:
        """One path per decided edge with every load <= limit, or None.

        Edge viability is a single mask test against the set of saturated
        edges; capacities are how many more circuits an edge can take.
        """
        if self.floor > limit:
            return None
        if not opts_list:
            return []
        cost = self.cost
        caps = [(limit - b) // cost for b in self.base]
        dead = 0
        for e, c in enumerate(caps):
            if c <= 0:
                dead |= 1 << e
        filtered = []
        for opts in opts_list:
            good = [pb for pb in self.opts_bits(opts) if not pb[1] & dead]
            if not good:
                return None
            filtered.append(good)
        order = sorted(range(len(filtered)), key=lambda i: len(filtered[i]))
        chosen: list[tuple[int, ...] | None] = [None] * len(filtered)
        state = [dead]

        def rec(i: int) -> bool:
            if i == len(order):
                return True
            oi = order[i]
            for path, pbits in filtered[oi]:
                if pbits & state[0]:
                    continue
                newdead = 0
                for e in path:
                    caps[e] -= 1
                    if caps[e] == 0:
                        newdead |= 1 << e
                state[0] |= newdead
                chosen[oi] = path
                if rec(i + 1):
                    return True
                state[0] &= ~newdead
                for e in path:
                    caps[e] += 1
            chosen[oi] = None
            return False

        return chosen if rec(0) else None

    def pack_decided(self, pairs: list[tuple[int, int]], opts_list: list,
                     limit: int) -> list[tuple[int, ...]] | None:
        """Memoized pack: results are shared across branches that route the
        same multiset of server pairs at the same limit."""
        key = (limit, tuple(sorted(pairs)))
        hit = self._pack_memo.get(key, _MISS)
        if hit is not _MISS:
            if hit is None:
                return None
            queues = {pair: list(paths) for pair, paths in hit.items()}
            return [queues[pair].pop() for pair in pairs]
        packed = self.pack(opts_list, limit)
        if packed is None:
            self._pack_memo[key] = None
            return None
        grouped: dict[tuple[int, int], list] = {}
        for pair, path in zip(pairs, packed):
            grouped.setdefault(pair, []).append(path)
        self._pack_memo[key] = grouped
        return packed

    def route_min(self, opts_list: list[tuple[tuple[int, ...], ...]],
                  limit: int, seed: int | None = None) -> int | None:
        """Exact minimum max-load over path choices, or None if > limit.

        ``seed`` is the value of a known-feasible routing; the search then
        only needs to look for strictly better ones.
        """
        if self.floor > limit:
            return None
        n = len(opts_list)
        if n == 0:
            return self.floor
        order = sorted(range(n), key=lambda i: len(opts_list[i]))
        rmin = []
        for i in order:
            opts = opts_list[i]
            if not opts:
                return None
            rmin.append(min(max(self.base[e] + self.cost for e in path)
                            for path in opts))
        suffix = [0] * (n + 1)
        for i in range(n - 1, -1, -1):
            suffix[i] = max(suffix[i + 1], rmin[i])
        if seed is not None and seed <= limit and seed == max(self.floor, suffix[0]):
            return seed     # a feasible routing already meets the lower bound
        loads = self.base[:]
        cost = self.cost
        best: list[int | None] = [seed] if seed is not None and seed <= limit else [None]

        def rec(i: int, cur: int) -> None:
            cap = limit if best[0] is None else min(limit, best[0] - 1)
            if max(cur, suffix[i]) > cap:
                return
            if i == n:
                best[0] = cur
                return
            for path in opts_list[order[i]]:
                new = cur
                ok = True
                for e in path:
                    load = loads[e] + cost
                    if load > cap:
                        ok = False
                        break
                    if load > new:
                        new = load
                if not ok:
                    continue
                for e in path:
                    loads[e] += cost
                rec(i + 1, new)
                for e in path:
                    loads[e] -= cost

        rec(0, self.floor)
        return best[0]

    def lex_route(self, opts_list: list[tuple[tuple[int, ...], ...]],
                  target: int) -> tuple[int, ...] | None:
        """First path-index vector (in edge order) with max load <= target."""
        loads = self.base[:]
        cost = self.cost
        choice: list[int] = []

        def rec(i: int) -> bool:
            if i == len(opts_list):
                return True
            for ci, path in enumerate(opts_list[i]):
                if all(loads[e] + cost <= target for e in path):
                    for e in path:
                        loads[e] += cost
                    choice.append(ci)
                    if rec(i + 1):
                        return True
                    choice.pop()
                    for e in path:
                        loads[e] -= cost
            return False

        return tuple(choice) if rec(0) else None

    # -- heuristic upper bound ------------------------------------------------

    def heuristic(self) -> int | None:
        """Greedy mapping plus best-response routing; None if it dead-ends.

        Only used as an initial pruning threshold; any feasible value is a
        valid upper bound on the optimum.
        """
        mapping = dict(self.pinned)
        used: set[int] = set()
        for pos, slot in enumerate(self.unpinned):
            best_srv, best_score = None, None
            for srv in self.free:
                if srv in used:
                    continue
                score, ok = 0, True
                for eidx in self.trigger[pos]:
                    a, b = self.p.slice_edges[eidx]
                    other = mapping[b if a == slot else a]
                    d = self.dmin(srv, other)
                    if d >= _BIG:
                        ok = False
                        break
                    score = max(score, d)
                if ok and (best_score is None or (score, srv) < best_score):
                    best_score, best_srv = (score, srv), srv
            if best_srv is None:
                return None
            mapping[slot] = best_srv
            used.add(best_srv)

        loads = self.base[:]
        chosen: list[tuple[int, ...] | None] = [None] * len(self.p.slice_edges)

        def greedy_route(eidx: int) -> tuple[int, ...] | None:
            a, b = self.p.slice_edges[eidx]
            best_path, best_val = None, None
            for path in self.path_options(mapping[a], mapping[b]):
                val = max(loads[e] + self.cost for e in path)
                if best_val is None or val < best_val:
                    best_val, best_path = val, path
            return best_path

        for eidx in range(len(self.p.slice_edges)):
            path = greedy_route(eidx)
            if path is None:
                return None
            for e in path:
                loads[e] += self.cost
            chosen[eidx] = path
        for _ in range(8):
            improved = False
            for eidx, path in enumerate(chosen):
                for e in path:
                    loads[e] -= self.cost
                new_path = greedy_route(eidx)
                if new_path != path:
                    improved = True
                for e in new_path:
                    loads[e] += self.cost
                chosen[eidx] = new_path
            if not improved:
                break
        return max([self.floor] + [loads[e] for path in chosen for e in path])

    # -- branch and bound -----------------------------------------------------

    def solve(self) -> AssignmentSolution | None:
        p = self.p
        if len(self.free) < len(self.unpinned):
            return None
        heur = self.heuristic()
        threshold = heur if heur is not None else _BIG
        mapping: dict[int, int] = dict(self.pinned)
        used: set[int] = set()
        decided: list[tuple[tuple[int, ...], ...]] = []
        best: dict = {"z": None, "mapping": None}

        def limit() -> int:
            if best["z"] is None:
                return threshold
            return min(threshold, best["z"] - 1)

        def resolve(eidx: int) -> tuple[tuple[int, ...], ...]:
            a, b = p.slice_edges[eidx]
            return self.path_options(mapping[a], mapping[b])

        # Incremental routing witness: a concrete path per decided edge,
        # kept consistent with the current pruning limit. Extending it
        # greedily answers most feasibility questions; a full repack runs
        # only on conflict.
        witness: list[tuple[int, ...]] = []
        wit_loads = [0] * len(self.base)

        def wit_push(path: tuple[int, ...]) -> None:
            witness.append(path)
            for e in path:
                wit_loads[e] += 1

        def wit_pop(count: int) -> None:
            for _ in range(count):
                for e in witness.pop():
                    wit_loads[e] -= 1

        def wit_value() -> int:
            top = self.floor
            for e, n in enumerate(wit_loads):
                if n:
                    v = self.base[e] + self.cost * n
                    if v > top:
                        top = v
            return top

        def extend_witness(new_opts, cap: int) -> bool:
            """Grow the witness over new edges at max load <= cap."""
            if wit_value() <= cap:
                added = 0
                ok = True
                for opts in new_opts:
                    found = None
                    for path in opts:
                        if all(self.base[e] + self.cost * (wit_loads[e] + 1) <= cap
                               for e in path):
                            found = path
                            break
                    if found is None:
                        ok = False
                        break
                    wit_push(found)
                    added += 1
                if ok:
                    return True
                wit_pop(added)
            packed = self.pack(decided, cap)
            if packed is None:
                return False
            wit_pop(len(witness))
            for path in packed:
                wit_push(path)
            return True

        base_opts = []
        for eidx in self.initial_edges:
            opts = resolve(eidx)
            if not opts:
                return None
            base_opts.append(opts)
        decided.extend(base_opts)
        if not extend_witness(base_opts, limit()):
            return None

        def rec(pos: int) -> None:
            if pos == len(self.unpinned):
                cap = limit()
                w = wit_value()
                if w > cap:     # limit tightened since the witness was built
                    packed = self.pack(decided, cap)
                    if packed is None:
                        return
                    wit_pop(len(witness))
                    for path in packed:
                        wit_push(path)
                    w = wit_value()
                z = self.route_min(decided, cap, seed=w)
                if z is not None and (best["z"] is None or z < best["z"]):
                    best["z"] = z
                    best["mapping"] = dict(mapping)
                return
            slot = self.unpinned[pos]
            for srv in self.free:
                if srv in used:
                    continue
                mapping[slot] = srv
                new_opts = []
                ok = True
                for eidx in self.trigger[pos]:
                    a, b = p.slice_edges[eidx]
                    u, v = mapping[a], mapping[b]
                    if self.dmin(u, v) > limit():
                        ok = False
                        break
                    new_opts.append(self.path_options(u, v))
                if ok and new_opts:
                    decided.extend(new_opts)
                    ok = extend_witness(new_opts, limit())
                    if not ok:
                        del decided[-len(new_opts):]
                if ok:
                    used.add(srv)
                    rec(pos + 1)
                    used.discard(srv)
                    if new_opts:
                        del decided[-len(new_opts):]
                        wit_pop(len(new_opts))
                del mapping[slot]

        rec(0)
        if best["z"] is None:
            return None
        final_map = best["mapping"]
        z = best["z"]
        opts_in_order = []
        for a, b in p.slice_edges:
            opts_in_order.append(self.path_options(final_map[a], final_map[b]))
        routes = self.lex_route(opts_in_order, z)
        assert routes is not None, "optimal mapping lost its routing"
        paths = tuple(opts_in_order[i][routes[i]] for i in range(len(routes)))
        loads = self.base[:]
        for path in paths:
            for e in path:
                loads[e] += self.cost
        return AssignmentSolution(
            mapping=tuple(final_map[s] for s in range(p.slots)),
            routes=routes,
            paths=paths,
            objective=z,
            edge_loads=tuple(loads),
        )


def solve_fragmented(problem: AssignmentProblem) -> AssignmentSolution | None:
    """Provably minimum-overlap placement and routing; None when infeasible."""
    return _Search(problem).solve()


def brute_force_oracle(problem: AssignmentProblem) -> AssignmentSolution | None:
    """Exhaustive reference solver for small instances.

    Enumerates every injective slot-to-server mapping and every path
    combination, with the same tie-break as the branch-and-bound solver.
    Guarded to |slots| <= 5 and |free| <= 8 to stay tractable.
    """
    pinned = dict(problem.pinned)
    unpinned = [s for s in range(problem.slots) if s not in pinned]
    taken = set(pinned.values())
    free = tuple(s for s in sorted(set(problem.free_servers)) if s not in taken)
    if len(unpinned) > 5 or len(free) > 8:
        raise ValueError("instance above the oracle guard (5 slots / 8 servers)")
    if len(free) < len(unpinned):
        return None
    base = list(problem.loads)
    floor = max(problem.loads, default=0)
    cost = problem.circuit_cost
    best: AssignmentSolution | None = None
    for perm in itertools.permutations(free, len(unpinned)):
        mapping = dict(pinned)
        mapping.update(zip(unpinned, perm))
        opts_list = []
        feasible = True
        for a, b in problem.slice_edges:
            opts = problem.paths(mapping[a], mapping[b])
            if not opts:
                feasible = False
                break
            opts_list.append(opts)
        if not feasible:
            continue
        for combo in itertools.product(*[range(len(o)) for o in opts_list]):
            loads = base[:]
            z = floor
            for opts, ci in zip(opts_list, combo):
                for e in opts[ci]:
                    loads[e] += cost
                    if loads[e] > z:
                        z = loads[e]
            if best is None or z < best.objective:
                paths = tuple(opts_list[i][combo[i]] for i in range(len(combo)))
                best = AssignmentSolution(
                    mapping=tuple(mapping[s] for s in range(problem.slots)),
                    routes=tuple(combo),
                    paths=paths,
                    objective=z,
                    edge_loads=tuple(loads),
                )
    return best


# -- request graphs and serialization ----------------------------------------

def request_graph(shape: Dims, server_dims: Dims) -> tuple[int, tuple[tuple[int, int], ...], Dims]:
    """Server-level request graph (slots, torus edges, slot grid) of a shape.

    The shape must tile whole servers; fragmented placement works at
    server granularity.
    """
    if any(s % d for s, d in zip(shape, server_dims)):
        raise ValueError(f"shape {shape} is not aligned to servers {server_dims}")
    grid = tuple(s // d for s, d in zip(shape, server_dims))
    slots = _prod(grid)
    edges: list[tuple[int, int]] = []
    seen = set()
    gx, gy, gz = grid

    def slot(x, y, z):
        return x + gx * (y + gy * z)

    for axis, ext in enumerate(grid):
        if ext == 1:
            continue
        for z in range(gz):
            for y in range(gy):
                for x in range(gx):
                    pos = (x, y, z)
                    if pos[axis] != 0:
                        continue
                    for i in range(ext):
                        here = list(pos)
                        there = list(pos)
                        here[axis] = i
                        there[axis] = (i + 1) % ext
                        pair = (slot(*here), slot(*there))
                        pair = (min(pair), max(pair))
                        if pair not in seen:
                            seen.add(pair)
                            edges.append(pair)
    return slots, tuple(edges), grid


def slot_coords(grid: Dims, slot: int) -> Dims:
    return chip_xyz(grid, slot)


def problem_to_json(problem: AssignmentProblem) -> str:
    doc = {
        "slots": problem.slots,
        "slice_edges": [list(e) for e in problem.slice_edges],
        "servers": problem.graph.num_servers,
        "fiber_edges": [[e.u, e.v] for e in problem.graph.edges],
        "capacity": problem.graph.edges[0].capacity if problem.graph.edges else 4,
        "loads": list(problem.loads),
        "free_servers": list(problem.free_servers),
        "k_paths": problem.k_paths,
        "circuit_cost": problem.circuit_cost,
        "pinned": {str(s): srv for s, srv in problem.pinned},
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def problem_from_json(text: str) -> AssignmentProblem:
    doc = json.loads(text)
    graph = ServerGraph.from_pairs(
        int(doc["servers"]),
        [tuple(p) for p in doc["fiber_edges"]],
        capacity=int(doc.get("capacity", 4)),
    )
    loads = doc.get("loads") or [0] * len(graph.edges)
    return AssignmentProblem(
        slots=int(doc["slots"]),
        slice_edges=tuple((int(a), int(b)) for a, b in doc["slice_edges"]),
        free_servers=tuple(int(s) for s in doc["free_servers"]),
        graph=graph,
        loads=tuple(int(x) for x in loads),
        k_paths=int(doc.get("k_paths", 4)),
        circuit_cost=int(doc.get("circuit_cost", 4)),
        pinned=tuple((int(s), int(srv)) for s, srv in doc.get("pinned", {}).items()),
    )
