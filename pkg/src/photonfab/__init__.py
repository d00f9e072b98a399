"""Simulator and allocation toolkit for photonic direct-connect datacenters.

Models racks of accelerator chips in 3D tori with a programmable photonic
layer: contiguous and fragmented slice allocation, an exact min-overlap
placement solver, SerDes port and circuit control, an alpha-beta
collective cost model, and reproducible experiment drivers.
"""

from .alloc_contiguous import (allocate_contiguous, deallocate,
                               fragmentation_index, largest_free_block)
from .control_plane import (CapacityError, Circuit, LossBudgetError,
                            PatchReport, PortAssignment, assign_ports,
                            circuits_to_json, handle_failure, realize_slice,
                            reconfig_time)
from .cost_model import (CollectiveCost, CostParams, bucket_allreduce,
                         ring_all_gather, ring_reduce_scatter, train_iter_time)
from .frag_alloc import (AssignmentProblem, AssignmentSolution, CapacityCheck,
                         brute_force_oracle, check_capacity, problem_from_json,
                         problem_to_json, request_graph, solve_fragmented)
from .slicemodel import (BASELINE, MORPHLUX, Collective, CommGroup, Mode,
                         Slice, SliceRequest, collective_rings, ici,
                         parse_mode, parse_request, port_utilization,
                         usable_dims)
from .topology import (Axis, Cluster, ClusterConfig, ConfigurationError,
                       FiberEdge, LinkEdge, Rack, ServerGraph, TpuCoord,
                       build_cluster, enumerate_paths, neighbors)
from .workload import (ExperimentResult, SimConfig, SliceDistribution,
                       SolverTelemetry, allocate_flexible, churn,
                       default_distribution, fill_cluster, fill_even,
                       run_experiment)

__version__ = "0.1.0"
