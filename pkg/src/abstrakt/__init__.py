"""Exact inference over finite structural causal models and their
cluster-level abstractions: rational-arithmetic counterfactual queries,
consistency checking, projected high-level models, cluster diagrams, and
identification from observational data."""

from .errors import (
    AbstraktError,
    CyclicDependencies,
    DomainMismatch,
    FixpointMismatch,
    ImpossibleContext,
    IncompleteAssignment,
    IncompleteValuePartition,
    InadmissibleClustering,
    NonNormalizedBlock,
    NotClusterUnion,
    NotPartition,
    PartialMechanism,
    QuerySyntaxError,
    SizeExceeded,
    UnboundVariable,
    UnknownHighValue,
    UnknownVariable,
    UnsupportedData,
    ValidationError,
    ZeroConditioning,
)
from .scm import (
    DiscreteScm,
    Diagram,
    ExoMember,
    ExogenousBlock,
    Mechanism,
    VariableDecl,
    enumeration_budget,
    format_decimal,
    format_rational,
    induce_diagram,
    load_scm,
    parse_probability,
    save_scm,
    scm_to_doc,
    topological_order,
    validate_scm,
)
from .valuation import (
    CounterfactualQuery,
    DistributionTable,
    HardIntervention,
    OutcomeAtom,
    QueryTerm,
    SoftIntervention,
    constant_soft_intervention,
    evaluate_unit,
    joint_distribution,
    marginal_pushforward,
    prob_query,
)
from .abstraction import (
    AicReport,
    AicWitness,
    Cluster,
    ClusterMap,
    ClusterValue,
    SigmaMarker,
    apply_tau,
    check_aic,
    load_clusters,
    lower_query,
    preimage,
    translate_query,
    validate_clusters,
)
from .projection import (
    CanonicalResponse,
    DeltaSplit,
    HighLevelScm,
    canonical_response_profile,
    construct_projected_abstraction,
    disambiguation_bounds,
    high_from_doc,
    high_to_doc,
    load_high,
    project_full,
    projected_sample,
    resolve_sigma,
    resolve_sigma_high,
    save_high,
    sigma_distribution,
    verify_partial_projection,
)
from .graphs import (
    ClusterDiagram,
    CtfbnReport,
    CtfbnViolation,
    ancestors,
    build_cdag,
    build_projected_cdag,
    c_components,
    ctfbn_check,
    d_separated,
    graph_from_doc,
    graph_to_doc,
    load_graph,
    make_graph,
    save_graph,
    to_dot,
    topological_nodes,
)
from .identify import (
    Canon,
    IdDecision,
    IdQuery,
    Lookup,
    Product,
    Ratio,
    Sum,
    Sym,
    abstract_identify,
    estimand_to_doc,
    evaluate_estimand,
    identify_effect,
    render_estimand,
    simplify_estimand,
)

__version__ = "0.1.0"
