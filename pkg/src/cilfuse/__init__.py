"""cilfuse: a desk-scale class-incremental learning lab.

Two-stage pipeline on synthetic (or ingested) features: stage I clones the
top of a pretrained backbone into a per-step branch and finetunes it on the
novel classes; stage II fuses all branch logits through trainable
cross-branch transfer weights into one classifier over every class seen,
with routing baselines and a full metric/grid-search harness alongside.
"""

from .backbone import (
    ArchSpec,
    Block,
    Branch,
    ModelBundle,
    add_branch_stage1,
    all_branch_features,
    extract_features,
    finetune_k_blocks,
    full_finetune_baseline,
    pretrain_base,
)
from .data import (
    ClassGen,
    LabeledSet,
    Scenario,
    ScenarioSpec,
    build_scenario,
    gen_class_means,
    kmeans2,
    sample_set,
    scenario_from_json,
    scenario_from_rows,
    scenario_to_json,
    split_overlap_samples_cluster,
    split_overlap_samples_random,
)
from .evaluation import (
    EvalReport,
    GridResult,
    accuracy,
    grid_search,
    incremental_accuracy,
    metrics_report,
    prelim_sweep,
)
from .featfile import ingest_features, read_feature_file, write_feature_file
from .fusion import (
    FusionHead,
    FusionOutput,
    GlobalLabelMap,
    build_label_map,
    featcat_retrain,
    fused_forward,
    fused_predict,
    fused_predict_batch,
    init_fusion,
    logitcat_finetune,
    logitcat_retrain,
    loss_total,
    pool_overlap,
    train_fusion,
)
from .linalg import (
    Mat,
    Param,
    SgdConfig,
    cross_entropy,
    finite_diff_grad,
    l2_normalize,
    matmul,
    sgd_step,
    softmax,
)
from .memory import ExemplarMemory, balanced_batches, epoch_pool, select_exemplars
from .routing import (
    Router,
    confidence_route,
    routed_predict,
    routed_predict_batch,
    routing_accuracy,
    train_learned_router,
)

__version__ = "0.1.0"
