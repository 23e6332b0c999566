"""Energy-aware optimizer for DNN-style computation graphs.

Given a computation graph, a catalog of equivalence-preserving rewrite
rules and a profile-backed cost database, the optimizer searches the
joint space of equivalent graphs and per-node algorithm choices for the
pair minimizing a user-chosen scalarization of inference time, energy
and power.
"""

from .cost import (
    Assignment,
    CostDatabase,
    CostFunction,
    CostRecord,
    alg_label,
    distance,
    eval_cost,
    lookup,
    model_energy,
    model_power,
    model_time,
    normalization_refs,
)
from .errors import (
    CommandFailed,
    DomainMismatch,
    EnerflowError,
    GraphFormatError,
    InfeasibleConstraint,
    InvalidSite,
    MissingEntry,
    MissingInput,
    NotApplicable,
    ParseError,
    ProfileError,
    ShapeMismatch,
    SpaceTooLarge,
)
from .graph import (
    EdgeRef,
    Graph,
    GraphBuilder,
    Node,
    NodeSignature,
    OpKind,
    TensorShape,
    canonical_hash,
    equivalent,
    execute,
    graph_from_json,
    graph_to_json,
    infer_shapes,
    load_graph,
    save_graph,
    signature,
    signatures,
    validate,
)
from .profiling import (
    ExternalProfiler,
    SyntheticProfiler,
    candidate_algorithms,
    ensure_profiled,
    load,
    measure_external,
    persist,
    synthetic_profile,
)
from .rules import (
    MatchSite,
    SubstitutionRule,
    apply,
    default_rules,
    match_rule,
    neighbors,
    select_rules,
)
from .search import (
    OptimizationResult,
    SearchConfig,
    SearchStats,
    brute_force_assignment,
    brute_force_space,
    constrained_optimize,
    default_assignment,
    inner_search,
    outer_search,
)

__version__ = "0.1.0"
