"""Slice requests, realized slices, and the contention model.

A slice is a torus-shaped subset of one rack's chips. Under the static
(baseline) wiring a slice may ride a dimension's ring only when the ring
closes inside the slice, i.e. the slice spans the rack's full extent in
that dimension; partial rings would cross foreign chips and cause
congestion. Slices with no full-extent dimension fall back to a single
Hamiltonian snake ring over their private internal links, worth one
dimension of bandwidth. Bandwidth redirection (morphlux mode) lifts the
restriction entirely; ici modes keep all ports active at a uniformly
degraded per-port bandwidth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING

from .topology import Axis, Dims, LinkEdge, TpuCoord, _prod

if TYPE_CHECKING:
    from .control_plane import Circuit


@dataclass(frozen=True)
class Mode:
    kind: str                      # "baseline" | "morphlux" | "ici"
    fraction: float | None = None  # ici only: observed per-port bandwidth share

    def __post_init__(self):
        if self.kind not in ("baseline", "morphlux", "ici"):
            raise ValueError(f"unknown mode kind {self.kind!r}")
        if self.kind == "ici":
            if self.fraction is None or not 0 < self.fraction <= 1:
                raise ValueError("ici mode needs a bandwidth fraction in (0, 1]")
        elif self.fraction is not None:
            raise ValueError(f"{self.kind} mode takes no fraction")

    @property
    def label(self) -> str:
        if self.kind == "ici":
            return f"ici{self.fraction:g}"
        return self.kind


BASELINE = Mode("baseline")
MORPHLUX = Mode("morphlux")


def ici(fraction: float) -> Mode:
    return Mode("ici", fraction)


def parse_mode(text: str) -> Mode:
    text = text.strip().lower()
    if text == "baseline":
        return BASELINE
    if text == "morphlux":
        return MORPHLUX
    if text.startswith("ici"):
        return ici(float(text[3:].strip("():") or "nan"))
    raise ValueError(f"unknown mode {text!r}")


class Collective(str, Enum):
    REDUCE_SCATTER = "reduce_scatter"
    ALL_GATHER = "all_gather"
    ALL_REDUCE = "all_reduce"


@dataclass(frozen=True)
class CommGroup:
    members: tuple[TpuCoord, ...]
    bandwidth_requirement: float
    collective: Collective = Collective.ALL_REDUCE

    def __post_init__(self):
        if self.bandwidth_requirement < 0:
            raise ValueError("bandwidth requirement must be nonnegative")


@dataclass(frozen=True)
class SliceRequest:
    shape: Dims
    mode: Mode = BASELINE

    def __post_init__(self):
        if any(s < 1 for s in self.shape):
            raise ValueError(f"invalid slice shape {self.shape}")

    @property
    def size(self) -> int:
        return _prod(self.shape)


def parse_request(text: str) -> SliceRequest:
    """Parse an ``SXxSYxSZ:mode`` request string, e.g. ``4x2x1:morphlux``."""
    shape_part, _, mode_part = text.partition(":")
    parts = shape_part.lower().split("x")
    if len(parts) != 3:
        raise ValueError(f"slice shape must be NxNxN, got {shape_part!r}")
    shape = tuple(int(p) for p in parts)
    mode = parse_mode(mode_part) if mode_part else BASELINE
    return SliceRequest(shape, mode)


@dataclass
class Slice:
    """A realized allocation: chips, internal links, and mode.

    ``servers`` and ``slot_shape`` are set for fragmented slices (and for
    patched ones), recording the slot-to-server mapping of the realized
    server-level request graph.
    """

    id: int
    rack: int
    shape: Dims                    # as placed (axis permutation applied)
    tpus: tuple[TpuCoord, ...]
    links: tuple[LinkEdge, ...]
    mode: Mode
    fragmented: bool
    mask: int
    anchor: Dims | None = None
    servers: tuple[int, ...] | None = None
    slot_shape: Dims | None = None
    comm_groups: tuple[CommGroup, ...] = ()
    circuits: list["Circuit"] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.tpus)


def _validate_shape(shape: Dims, rack_dims: Dims) -> None:
    if any(not 1 <= s <= r for s, r in zip(shape, rack_dims)):
        raise ValueError(f"shape {shape} does not fit rack {rack_dims}")


def usable_dims(shape: Dims, rack_dims: Dims,
                mode: Mode = BASELINE) -> tuple[frozenset[Axis], float]:
    """Contention-free dimensions of a slice shape and its bandwidth fraction.

    Baseline: a dimension is usable iff the slice spans the rack's full
    extent there (the ring closes via wraparound inside the slice) and the
    extent exceeds one. The fraction is ``max(usable, 1)/3`` for multi-chip
    slices (the snake fallback grants one dimension's worth), 0 for a
    single chip. Morphlux always redirects to full egress bandwidth; ici
    keeps every dimension at its degraded fraction.
    """
    _validate_shape(shape, rack_dims)
    spanned = frozenset(ax for ax in Axis if shape[ax] > 1)
    if mode.kind == "morphlux":
        return spanned, 1.0
    if mode.kind == "ici":
        return spanned, float(mode.fraction)
    if _prod(shape) == 1:
        return frozenset(), 0.0
    usable = frozenset(ax for ax in Axis
                       if shape[ax] == rack_dims[ax] and shape[ax] > 1)
    return usable, max(len(usable), 1) / 3


def port_utilization(shape: Dims, rack_dims: Dims, mode: Mode = BASELINE,
                     ports_per_tpu: int = 6) -> float:
    """Fraction of a chip's ports a slice can drive without contention.

    Baseline uses two ports per usable dimension (the snake fallback
    counts two); redirection and ici routing use every port. Single-chip
    slices have nothing to talk to and use none.
    """
    if _prod(shape) == 1:
        return 0.0
    if mode.kind in ("morphlux", "ici"):
        return 1.0
    usable, _ = usable_dims(shape, rack_dims, mode)
    ports_per_dim = ports_per_tpu // 3
    ports = ports_per_dim * len(usable) if usable else ports_per_dim
    return ports / ports_per_tpu


def collective_rings(shape: Dims, rack_dims: Dims,
                     mode: Mode = BASELINE) -> tuple[tuple[int, ...], float]:
    """Ring structure a collective runs over, with its bandwidth fraction.

    Baseline executes the per-dimension bucket rings when the usable
    dimensions span the whole slice, otherwise one snake ring over all
    chips. Morphlux runs a single ring over all chips at full bandwidth
    (fixed neighbors, no per-step reconfiguration); ici buckets over every
    spanned dimension at the degraded fraction.
    """
    _validate_shape(shape, rack_dims)
    size = _prod(shape)
    if size == 1:
        return (), 0.0
    if mode.kind == "morphlux":
        return (size,), 1.0
    if mode.kind == "ici":
        dims = tuple(shape[ax] for ax in Axis if shape[ax] > 1)
        return dims, float(mode.fraction)
    usable, fraction = usable_dims(shape, rack_dims, mode)
    dims = tuple(shape[ax] for ax in sorted(usable))
    if usable and _prod(dims) == size:
        return dims, fraction
    return (size,), fraction
