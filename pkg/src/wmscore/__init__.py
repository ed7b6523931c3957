"""Feature attribution through the Möbius transform of a black-box value function."""

__version__ = "0.1.0"

from .errors import (
    BudgetExhausted,
    DimensionError,
    DuplicateSubset,
    MissingSubset,
    NonFiniteValue,
    OracleError,
    OracleTimeout,
    ProtocolError,
    TargetOutsideFamily,
    ValidationError,
    WMSError,
)
from .lattice import (
    FeatureSet,
    SetFunction,
    iterate_subsets,
    iterate_supersets,
    make_set_function,
    mobius_transform,
    mobius_transform_naive,
    zeta_transform,
    zeta_transform_naive,
)
from .oracle import (
    EvaluationLog,
    Oracle,
    OracleSpec,
    PolynomialModel,
    connect_http_oracle,
    eval_keep,
    isolation_table,
    load_table_oracle,
    polynomial_ground_truth_mobius,
    polynomial_oracle,
    spawn_subprocess_oracle,
    table_oracle,
)
from .methods import (
    KERNELS,
    AttributionResult,
    WeightKernel,
    arch_attribute_kernel,
    arch_detect,
    arch_detect_four_point,
    check_faithful,
    efficiency_check,
    get_kernel,
    mi_kernel,
    mobius_kernel,
    mobius_score,
    mobius_score_recursive,
    pie_kernel,
    shapley_kernel,
    sii_kernel,
    sti_kernel,
    tie_kernel,
    weighted_score,
)
from .analysis import (
    ArchDetectColumn,
    ComparisonTable,
    EffectSummary,
    classes_by_cardinality,
    compare_methods,
    dummy_feature_report,
    normalized_effect,
)
