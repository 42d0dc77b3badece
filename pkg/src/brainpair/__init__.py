"""Self-supervised representation learning on paired brain-graph + volume views.

The pipeline: build (or synthesize) paired functional-graph / mean-volume
instances, pretrain a two-branch encoder with a stop-gradient Siamese
objective plus a cross-task invariance term, then probe, fine-tune,
correlate, and explain.
"""

from .analysis import (
    ExplainConfig,
    ImportanceMap,
    aggregate_importance,
    explain,
    export_report,
    max_channel_correlation,
    max_fc_correlation,
)
from .augment import (
    AugmentConfig,
    AugmentedView,
    Provenance,
    apply_provenance,
    augment_view,
    dropout_edges,
    identity_view,
    image_augment,
    mask_node_features,
    roi_aligned_mask,
    soft_roi_mask,
)
from .autodiff import Tensor, gradient_check
from .data import (
    AtlasVolume,
    BrainGraph,
    Dataset,
    FoldSplit,
    Phenotype,
    PhenotypeTable,
    TaskInstance,
    extract_roi_series,
    load_dataset,
    make_folds,
    save_dataset,
    split_into_blocks,
)
from .downstream import (
    DownstreamConfig,
    MetricReport,
    aggregate_subject_predictions,
    embed_instances,
    evaluate_classification,
    evaluate_regression,
    finetune,
    run_cv,
    train_probe,
    train_supervised,
)
from .graphs import (
    build_graph,
    build_instance,
    mean_image,
    partial_corr_matrix,
    pearson_matrix,
    threshold_edges,
)
from .model import (
    EncoderConfig,
    GraphImageEncoder,
    Predictor,
    TaskHead,
    build_predictor,
    build_task_head,
    clone_encoder,
    encode,
    load_checkpoint,
    save_checkpoint,
)
from .selfsup import (
    TrainConfig,
    TrainLog,
    collapse_statistic,
    sample_cross_task,
    symmetric_cosine_loss,
    total_loss,
    train_ssl,
)
from .synth import SynthConfig, generate_synthetic, make_block_atlas

__version__ = "0.1.0"
