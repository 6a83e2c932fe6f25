"""Sum-of-ranks tensor recovery via log-det reweighted least squares."""

from .tensor import (
    DenseTensor,
    ModeSubset,
    Shape,
    allocation_audit,
    dematricize,
    matricize,
    null_space,
    pinv_solve,
    read_srt1,
    singular_values,
    write_srt1,
)
from .family import (
    Family,
    RankVector,
    TreeGraph,
    bbht_family,
    build_tree,
    complementary_family,
    is_exhaustive,
    is_feasible,
    root_subset,
    tucker_family,
    validate,
    variety_dim,
)
from .network import (
    Network,
    RankAdaptPolicy,
    branch_matrices,
    contract_full,
    contract_subset,
    cp_tensor,
    gram_z,
    network_distance,
    network_inner,
    orthonormalize,
    random_network,
    read_network,
    root_shift,
    write_network,
)
from .operators import (
    DecomposedOperator,
    DenseOperator,
    SamplingOperator,
    gaussian_decomposed,
    gaussian_dense,
    kernel_basis,
    read_operator,
    sampling,
    write_operator,
)
from .objective import (
    WeightSet,
    det_eps,
    f_a_gamma,
    f_gamma,
    g_s,
    low_rank_weights,
    q_limit,
    rank_eps,
    weights,
)
from .irls import (
    GammaSchedule,
    RunReport,
    SolverConfig,
    image_update,
    kernel_update,
    min_norm_init,
    relaxed_update,
    run,
)
from .airls import AirlsConfig, node_update, path_operator, run_airls
from .experiments import (
    Classification,
    ExperimentSpec,
    classify,
    gen_reference,
    preset,
    run_experiment,
    sensitivity_loop,
)

__version__ = "0.1.0"
