"""Residual concept-bottleneck models on precomputed embeddings.

Train interpretable linear concept classifiers, fill concept-bank gaps with
learnable residual vectors, convert those vectors into real candidate
concepts, and score the result with the concept-utilization-efficiency
metric.  Embeddings are inputs; no encoder runs here.
"""

from .bottleneck import (
    ActivationMatrix,
    Standardizer,
    apply_standardizer,
    batch_standardize,
    concept_activations,
    fit_standardizer,
    invert_standardizer,
)
from .concept_bank import (
    ConceptBank,
    RankedMatches,
    append_concept,
    assemble_base_bank,
    bank_size_lint,
    build_bank,
    load_bank,
    nearest_candidates,
    save_bank,
)
from .concept_discovery import (
    DiscoveryState,
    SnapRecord,
    concept_similarity_loss,
    discovery_round,
    init_discovered_classifier,
    init_discovered_vector,
    init_discovery_state,
    run_incremental_discovery,
    snap_to_candidate,
)
from .data_io import (
    EmbeddingMatrix,
    LabelTable,
    SyntheticTask,
    generate_synthetic_task,
    load_embedding_matrix,
    load_label_table,
    load_token_list,
    save_embedding_matrix,
    save_label_table,
    save_token_list,
)
from .evaluation import (
    RunReport,
    accuracy,
    cue,
    emit_report,
    few_shot_split,
    oracle_best_single_addition,
    parse_report,
)
from .optimizer_core import (
    AdamState,
    LinearClassifier,
    RegularizerSpec,
    adam_step,
    cosine_backward,
    cross_entropy,
    elastic_net,
    finite_difference_check,
    forward,
    gradients,
    load_classifier,
    save_classifier,
)
from .residual_trainer import (
    ResidualModel,
    TrainingConfig,
    TrainTrace,
    init_residual_model,
    load_checkpoint,
    predict,
    save_checkpoint,
    stratified_split,
    train_pcbm,
    train_pcbm_h,
    train_residual,
    zero_shot,
)

__version__ = "0.1.0"
