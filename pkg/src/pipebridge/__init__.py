"""Reconstruction of mass transport on pipe networks from partial observations.

Layers:

- :mod:`pipebridge.algebra` -- nonnegative vector/matrix primitives and KL.
- :mod:`pipebridge.network` -- water-network model and the transition prior.
- :mod:`pipebridge.solver` -- proximal bridge solver and duality machinery.
- :mod:`pipebridge.observability` -- uniqueness analysis and canonicalization.
- :mod:`pipebridge.simulate` -- forward transport oracle and scenario files.
- :mod:`pipebridge.io` / :mod:`pipebridge.cli` -- file formats and commands.
"""

from .algebra import elementwise, kl_divergence, row_sums
from .types import MarkovPrior, ObservationModel, SolverConfig, TransportPlan
from .solver import (
    backward_pass,
    bca_sweep,
    dual_objective,
    forward_pass,
    inner_solve,
    primal_objective,
    proximal_solve,
    recover_primal,
    reduce_support,
)
from .observability import (
    ObservabilityReport,
    canonicalize,
    controlled_prior,
    downstream_unobserved_set,
    kernel_and_rank,
    observability_matrix,
    optimal_set_shift,
)
from .network import (
    FlowSeries,
    NetworkModel,
    PipeSpec,
    build_prior,
    line_transitions,
    normalized_speed,
    pipe_row,
)
from .simulate import Scenario, make_scenario, propagate

__all__ = [
    "kl_divergence",
    "row_sums",
    "elementwise",
    "MarkovPrior",
    "ObservationModel",
    "SolverConfig",
    "TransportPlan",
    "reduce_support",
    "backward_pass",
    "forward_pass",
    "bca_sweep",
    "dual_objective",
    "recover_primal",
    "inner_solve",
    "proximal_solve",
    "primal_objective",
    "observability_matrix",
    "kernel_and_rank",
    "downstream_unobserved_set",
    "controlled_prior",
    "optimal_set_shift",
    "canonicalize",
    "ObservabilityReport",
    "PipeSpec",
    "NetworkModel",
    "FlowSeries",
    "normalized_speed",
    "line_transitions",
    "pipe_row",
    "build_prior",
    "Scenario",
    "propagate",
    "make_scenario",
]

__version__ = "0.1.0"
