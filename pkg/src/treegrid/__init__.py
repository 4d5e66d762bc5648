"""treegrid: a multi-site TreePM N-body simulator at desk scale.

One periodic simulation box is partitioned into x-slabs across several
"sites" (one process or thread each) that exchange particles, balancing
samples, essential-tree fragments and sparse mesh cells over a tuned
wide-area channel -- real TCP streams or a deterministic in-process
emulation of them.
"""

from .domain import (
    CosmologyParams,
    Particle,
    Particles,
    RunConfig,
    SlabDomain,
    StepTimings,
    validate_domains,
    wrap_position,
)

__version__ = "0.1.0"

__all__ = [
    "CosmologyParams",
    "Particle",
    "Particles",
    "RunConfig",
    "SlabDomain",
    "StepTimings",
    "validate_domains",
    "wrap_position",
    "__version__",
]
