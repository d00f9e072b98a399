"""Alpha-beta cost model for ring and multi-dimensional bucket collectives.

``beta_unit`` is the per-byte transfer time at a chip's full egress
bandwidth (all ports), so running a collective at a bandwidth fraction f
scales the byte term by 1/f. ``beta_bytes`` in a cost is therefore the
payload already multiplied by that contention factor; multiplying by
``beta_unit`` gives seconds. Arithmetic stays exact when called with
Fraction arguments.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .slicemodel import Mode, collective_rings
from .topology import ClusterConfig, Dims


@dataclass(frozen=True)
class CostParams:
    alpha: float                 # seconds of software overhead per ring step
    beta_unit: float             # seconds per byte at full egress bandwidth
    reconfig_delay: float        # seconds per switch reprogramming

    def __post_init__(self):
        if self.alpha < 0 or self.beta_unit <= 0 or self.reconfig_delay < 0:
            raise ValueError("cost parameters must be positive")

    @classmethod
    def from_config(cls, config: ClusterConfig) -> "CostParams":
        return cls(alpha=config.alpha,
                   beta_unit=1.0 / config.egress_bandwidth,
                   reconfig_delay=config.reconfig_delay)


@dataclass(frozen=True)
class CollectiveCost:
    """Breakdown of one collective: steps, contention-scaled bytes, reconfigs."""

    alpha_steps: int
    beta_bytes: float
    reconfigs: int = 0

    def total_seconds(self, params: CostParams) -> float:
        return (self.alpha_steps * params.alpha
                + self.beta_bytes * params.beta_unit
                + self.reconfigs * params.reconfig_delay)

    def __add__(self, other: "CollectiveCost") -> "CollectiveCost":
        return CollectiveCost(self.alpha_steps + other.alpha_steps,
                              self.beta_bytes + other.beta_bytes,
                              self.reconfigs + other.reconfigs)

    def with_reconfigs(self, reconfigs: int) -> "CollectiveCost":
        return replace(self, reconfigs=reconfigs)


def _check_ring_args(nodes: int, nbytes, fraction) -> None:
    if nodes < 1:
        raise ValueError("ring size must be >= 1")
    if nbytes < 0:
        raise ValueError("payload must be nonnegative")
    if not 0 < fraction <= 1:
        raise ValueError("bandwidth fraction must be in (0, 1]")


def ring_reduce_scatter(nodes: int, nbytes, fraction) -> CollectiveCost:
    """Ring reduce-scatter: n-1 steps, (n-1)/n of the payload per chip.

    Callers add a reconfiguration term themselves when the ring was just
    programmed onto the optical fabric.
    """
    _check_ring_args(nodes, nbytes, fraction)
    if nodes == 1:
        return CollectiveCost(0, 0)
    return CollectiveCost(nodes - 1, nbytes * (nodes - 1) / nodes / fraction)


def ring_all_gather(nodes: int, nbytes, fraction) -> CollectiveCost:
    """Ring all-gather; identical cost structure to reduce-scatter."""
    return ring_reduce_scatter(nodes, nbytes, fraction)


def bucket_allreduce(dims: tuple[int, ...], nbytes, fraction) -> CollectiveCost:
    """Sequential per-dimension bucket all-reduce over a torus.

    Reduce-scatter runs across the dimensions in order with the buffer
    shrinking by each ring's size, then all-gather mirrors it in reverse.
    The byte term telescopes to 2N(1 - 1/prod(dims)) regardless of the
    dimension order; ``fraction`` is the egress bandwidth share available
    to each ring.
    """
    if any(d < 1 for d in dims):
        raise ValueError("ring sizes must be >= 1")
    if not 0 < fraction <= 1:
        raise ValueError("bandwidth fraction must be in (0, 1]")
    total = 1
    steps = 0
    for d in dims:
        total *= d
        steps += d - 1
    if total == 1 or nbytes == 0:
        return CollectiveCost(2 * steps, 0)
    return CollectiveCost(2 * steps, 2 * nbytes * (total - 1) / total / fraction)


def train_iter_time(gradient_bytes, compute_seconds: float, shape: Dims,
                    rack_dims: Dims, mode: Mode, params: CostParams) -> float:
    """One data-parallel training iteration: compute plus gradient all-reduce.

    The all-reduce runs over the slice's mode-dependent ring structure.
    Reconfiguration is a one-time job cost and is not charged per
    iteration.
    """
    if compute_seconds < 0:
        raise ValueError("compute_seconds must be nonnegative")
    rings, fraction = collective_rings(shape, rack_dims, mode)
    if not rings or fraction == 0:
        return compute_seconds
    comm = bucket_allreduce(rings, gradient_bytes, fraction).total_seconds(params)
    return compute_seconds + comm
