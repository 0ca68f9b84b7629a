"""Deterministic federated-learning simulation with mirror-descent server
optimizers, doubly adaptive step sizes, and numerical verification suites."""

__version__ = "0.1.0"

from .clients import (
    ClientDataset,
    ClientUpdate,
    LocalConfig,
    ScaffoldState,
    exact_projection,
    local_sgd,
    scaffold_step,
)
from .engine import (
    CSV_HEADER,
    RoundDetail,
    RoundRecord,
    RunConfig,
    RunResult,
    evaluate,
    final_window_loss,
    records_to_csv,
    run,
    sample_participants,
    sweep,
)
from .errors import (
    BracketExpansionError,
    ConfigError,
    DegenerateDirectionError,
    DimensionMismatchError,
    DomainError,
    EmptyAggregationError,
    FedMirrorError,
    InconclusiveError,
    NonFiniteError,
    SingularSystemError,
)
from .geometry import (
    CustomGenerator,
    QuadraticGenerator,
    bregman,
    bregman_dual,
    cosh_generator,
    dual_slope,
    identity_generator,
    inverse_mirror_map,
    invert_dual_slope,
    mirror_map,
    validate_generator,
)
from .optimizers import (
    FAMILIES,
    OptimizerConfig,
    ServerState,
    init_state,
    round_generator,
    round_preconditioner,
    server_step,
    step_fedavg,
    step_feddua,
    step_fedexp,
    step_fedopt,
)
from .oracles import (
    ApcReport,
    SuiteReport,
    check_apc,
    optimal_step_oracle,
    theorem1_suite,
    theorem2_suite,
    theorem3_suite,
    verify_lower_bound,
    verify_minimax,
)
from .synthetic import (
    FederationInstance,
    SyntheticSpec,
    client_gradient,
    generate,
    global_gradient,
    global_loss,
    heterogeneity_at_opt,
    instance_hash,
    load_instance,
    min_norm_solution,
    random_interpolation_instance,
    save_instance,
)
from .vectors import elementwise, mean_update, weighted_norm_sq
