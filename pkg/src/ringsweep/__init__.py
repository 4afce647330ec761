"""Multi-robot persistent monitoring on closed Lissajous paths.

Fleet coordination by repulsive phase coupling on a ring network, nominal
tracking by a constrained predictive controller, plus planning bounds, a
deterministic lossy network simulator and a failure-resilient protocol.
"""

from .coordination import (
    EquilibriumSpec,
    RingTopology,
    SwarmParams,
    equilibrium_phases,
    ring_topology,
    stable_p_set,
)
from .curve import CurveDiagnostics, LissajousParams, project, validate
from .planning import GuaranteeReport, MissionSpec, check_guarantees

__all__ = [
    "CurveDiagnostics",
    "EquilibriumSpec",
    "GuaranteeReport",
    "LissajousParams",
    "MissionSpec",
    "RingTopology",
    "SwarmParams",
    "check_guarantees",
    "equilibrium_phases",
    "project",
    "ring_topology",
    "stable_p_set",
    "validate",
]
