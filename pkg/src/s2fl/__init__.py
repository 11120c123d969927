"""Shared and specific subspace learning for multimodal classification."""
from .classify import (
    EmbeddingConfig,
    EvalReport,
    cml_predict,
    embed_modality,
    evaluate,
    fuse,
    nn_classify,
    transform,
)
from .core import (
    ConvergenceTrace,
    HyperParams,
    ModalityBlock,
    ProjectionModel,
    TrainingStack,
    build_stack,
    objective,
)
from .dataio import (
    DatasetBundle,
    SyntheticConfig,
    import_csv,
    load_bundle,
    load_model,
    make_synthetic,
    save_bundle,
    save_model,
    standardize,
    write_class_map,
)
from .errors import DimensionError, FormatError, NumericalError, S2FLError, StorageError, ValidationError
from .graph import JointGraph, build_graph, inter_adjacency, intra_adjacency, joint_adjacency, laplacian
from .solver import fit, lpp_init, soc_project, solve_subproblem, update_P

__version__ = "0.1.0"
