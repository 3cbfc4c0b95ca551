"""Real-time neural cellular automata texture synthesis on triangle meshes."""

from .mesh import (
    AdjacencyGraph,
    Mesh,
    MeshError,
    ValenceStats,
    build_adjacency,
    generate_icosphere,
    load_obj,
    save_obj,
    valence_stats,
)
from .perception import (
    EdgeGeometry,
    PerceptionBuffer,
    ShBasisConfig,
    grid_kernel_sample,
    grid_sobel_x,
    grid_sobel_y,
    perceive,
    rotate_about_normal,
    sh_eval,
)
from .engine import (
    CellStateBuffer,
    CompatibilityResult,
    ConditionField,
    GraftField,
    ModelConfig,
    ModelWeights,
    Simulation,
    adapt,
    apply_brush,
    check_compatibility,
    extract_color_geo,
    extract_pbr,
    make_mask_scheme,
    param_count,
    run,
    step,
)
from .model_io import (
    load_registry,
    load_weights,
    read_state_dump,
    save_registry,
    save_weights,
    write_state_dump,
)
from .losses import (
    EmbeddingVector,
    FeatureSet,
    FlowField,
    VectorFieldKind,
    appearance_im,
    average_embeddings,
    clip_directional,
    cosine_distance,
    eval_vector_field,
    hf_constraint,
    l_dir,
    l_dyn,
    l_m,
    l_mot,
    l_str,
    l_w,
    mes_dir_score,
    overflow_loss,
    project_to_view,
    relaxed_w,
    tangent_project,
)
from .trainer import (
    FromParent,
    RandomInit,
    TargetField,
    TrainConfig,
    TrainResult,
    TrainingDiverged,
    forward_backward,
    init_weights,
    make_stripes_target,
    train,
)

__version__ = "0.1.0"
