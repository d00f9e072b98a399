"""Best-effort sequential allocator for contiguous torus-shaped slices.

Placement is first-fit: racks in ascending id, anchor positions in
lexicographic (x, y, z) order, and at each anchor the six axis
permutations of the requested shape in a fixed order. Blocks never wrap
around a rack face except trivially, when the extent equals the rack's
full extent. Placement footprints are precomputed as chip bitmasks per
(rack dims, shape), so a fit test is a single mask comparison.
"""

from __future__ import annotations

import itertools
from functools import lru_cache

from .slicemodel import Slice, SliceRequest
from .topology import (Axis, Cluster, Dims, LinkEdge, Rack, TpuCoord,
                       block_mask, _prod)


@lru_cache(maxsize=None)
def _placements(rack_dims: Dims, shape: Dims) -> tuple[tuple[Dims, Dims, int], ...]:
    """All (oriented shape, anchor, mask) placements in first-fit scan order."""
    perms: list[Dims] = []
    for p in itertools.permutations(shape):
        if p not in perms:
            perms.append(p)
    out = []
    nx, ny, nz = rack_dims
    for anchor in itertools.product(range(nx), range(ny), range(nz)):
        for p in perms:
            ok = True
            for a, ext, dim in zip(anchor, p, rack_dims):
                if ext == dim:
                    if a != 0:     # full extent: every anchor gives the same set
                        ok = False
                        break
                elif a + ext > dim:
                    ok = False
                    break
            if ok:
                out.append((p, anchor, block_mask(rack_dims, anchor, p)))
    return tuple(out)


@lru_cache(maxsize=None)
def _free_blocks_by_volume(rack_dims: Dims) -> tuple[tuple[int, int], ...]:
    """(volume, mask) for every axis-aligned block, largest volume first."""
    blocks = []
    ranges = [range(1, d + 1) for d in rack_dims]
    for shape in itertools.product(*ranges):
        vol = _prod(shape)
        for _, _, mask in _placements(rack_dims, shape):
            blocks.append((vol, mask))
    blocks.sort(key=lambda item: (-item[0], item[1]))
    return tuple(blocks)


def _block_links(rack_dims: Dims, rack_id: int, oriented: Dims,
                 anchor: Dims) -> tuple[LinkEdge, ...]:
    """Physical chip links internal to an axis-aligned block.

    Includes the closing wraparound edge of a dimension only when the
    block spans the rack's full extent there.
    """
    links: list[LinkEdge] = []
    ax0, ay0, az0 = anchor
    sx, sy, sz = oriented
    for axis in Axis:
        ext = oriented[axis]
        rext = rack_dims[axis]
        if ext == 1:
            continue
        ortho = [range(ax0, ax0 + sx), range(ay0, ay0 + sy), range(az0, az0 + sz)]
        ortho[axis] = range(1)
        for x in ortho[0]:
            for y in ortho[1]:
                for z in ortho[2]:
                    base = [x, y, z]
                    base[axis] = anchor[axis]
                    if ext == rext == 2:
                        here = list(base)
                        there = list(base)
                        there[axis] += 1
                        links.append(LinkEdge(TpuCoord(rack_id, *here),
                                              TpuCoord(rack_id, *there),
                                              axis, wraparound=False, doubled=True))
                        continue
                    for i in range(ext - 1):
                        here = list(base)
                        there = list(base)
                        here[axis] += i
                        there[axis] += i + 1
                        links.append(LinkEdge(TpuCoord(rack_id, *here),
                                              TpuCoord(rack_id, *there),
                                              axis, wraparound=False))
                    if ext == rext:
                        here = list(base)
                        there = list(base)
                        here[axis] += ext - 1
                        links.append(LinkEdge(TpuCoord(rack_id, *here),
                                              TpuCoord(rack_id, *there),
                                              axis, wraparound=True))
    return tuple(links)


def _block_tpus(rack_id: int, oriented: Dims, anchor: Dims) -> tuple[TpuCoord, ...]:
    coords = []
    ax, ay, az = anchor
    for z in range(az, az + oriented[2]):
        for y in range(ay, ay + oriented[1]):
            for x in range(ax, ax + oriented[0]):
                coords.append(TpuCoord(rack_id, x, y, z))
    return tuple(coords)


def allocate_contiguous(cluster: Cluster, request: SliceRequest, *,
                        rack_ids: list[int] | None = None,
                        exclude_racks: frozenset[int] = frozenset()) -> Slice | None:
    """First-fit a contiguous block for ``request``; None when none fits.

    A None result is not an error: it signals the fragmented-allocation
    path. ``rack_ids`` restricts the scan (still in ascending order of the
    given sequence); ``exclude_racks`` removes racks from consideration.
    """
    dims = cluster.config.rack_dims
    size = request.size
    if size > cluster.config.chips_per_rack:
        return None
    racks = cluster.racks if rack_ids is None else [cluster.racks[i] for i in rack_ids]
    for rack in racks:
        if rack.id in exclude_racks or rack.free_count < size:
            continue
        for oriented, anchor, mask in _placements(dims, request.shape):
            if mask & rack.free_mask == mask:
                rack.free_mask &= ~mask
                slc = Slice(
                    id=cluster.new_slice_id(),
                    rack=rack.id,
                    shape=oriented,
                    tpus=_block_tpus(rack.id, oriented, anchor),
                    links=_block_links(dims, rack.id, oriented, anchor),
                    mode=request.mode,
                    fragmented=False,
                    mask=mask,
                    anchor=anchor,
                )
                cluster.slices[slc.id] = slc
                return slc
    return None


def deallocate(cluster: Cluster, slice_id: int) -> None:
    """Free a slice's chips and release any fiber units its circuits hold."""
    if slice_id not in cluster.slices:
        raise KeyError(f"unknown slice id {slice_id}")
    slc = cluster.slices.pop(slice_id)
    rack = cluster.racks[slc.rack]
    assert rack.free_mask & slc.mask == 0, "slice chips double-booked"
    rack.free_mask |= slc.mask & ~rack.dead_mask
    for circuit in slc.circuits:
        for eid in circuit.path:
            rack.fiber_loads[eid] -= circuit.fiber_units
            assert rack.fiber_loads[eid] >= 0, "fiber load went negative"


def largest_free_block(rack: Rack) -> int:
    """Chip count of the largest fully-free axis-aligned block in a rack."""
    free = rack.free_mask
    if free == 0:
        return 0
    for vol, mask in _free_blocks_by_volume(rack.dims):
        if mask & free == mask:
            return vol
    return 0


def fragmentation_index(rack: Rack) -> float:
    """1 - S/T with S the largest free block and T the free chip count.

    Zero for a fully allocated rack (nothing left to fragment) and for a
    fully free one (the whole rack is one block).
    """
    total_free = rack.free_count
    if total_free == 0:
        return 0.0
    return 1.0 - largest_free_block(rack) / total_free
