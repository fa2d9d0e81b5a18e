"""Graph convolutions from discretized differential operators, with
algebraic-multigrid pooling, on point-cloud k-NN graphs."""

from ._kernels import USE_NUMBA, active_path
from .geometry import (
    Graph,
    Mesh,
    PointCloud,
    augment,
    feature_knn_graph,
    knn_graph,
    normalize_unit_cube,
    regular_grid,
    sample_mesh,
    synth_dataset,
)
from .diffops import (
    AuxiliaryGraph,
    DiffFeatures,
    SparseOperator,
    Stencil,
    assemble_edge_average,
    assemble_gradient,
    assemble_transposed_derivative,
    build_auxiliary_graph,
    diff_features,
    diff_features_reference,
    extract_stencil,
)
from .conv import (
    ConvLayer,
    TapeNode,
    conv_backward,
    conv_forward,
    grid_equivalence_check,
    structured_kernel_2d,
)
from .amg import (
    Aggregation,
    Hierarchy,
    build_hierarchy,
    graclus_cluster,
    pool,
    restriction_matrix,
    smoothed_prolongation,
    unpool,
)
from .network import (
    Network,
    NetworkConfig,
    TrainReport,
    classify_forward,
    diffgcn_block,
    evaluate,
    gradcheck_network,
    train,
)
from .bench import CostSpec, cost_table, flop_count, latency_bench

__version__ = "0.1.0"
