"""gapcl: modality-gap preservation and compensation for class-incremental
learning, on toy dual encoders and exported embedding tables."""

from .compensation import (CompensationClassifier, EnsembleConfig, empty_classifier,
                           ensemble_predict, init_new_classes, train_classifier)
from .data import (EmbeddingTable, SyntheticConfig, TaskSplit, generate_synthetic,
                   make_table, read_table, split_tasks, subtable, write_table)
from .encoder import (DualEncoder, LowRankAdapter, TaskData, TrainConfig,
                      attach_adapters, classify_text, embed_images, embed_texts,
                      finetune_task, new_dual_encoder, pretrain_contrastive)
from .gapmetrics import GapReport, measure_gap, relative_delta
from .linalg import SvdResult, cosine, project_onto, qr_basis, svd
from .preservation import (EpochEstimate, PreservationConfig, estimate_epochs,
                           train_remaining_tasks)
from .protocol import (RunConfig, RunResult, aggregate_results, evaluate,
                       pinned_benchmark_config, run, run_with_artifacts)
from .subspace import (BoundReport, SubspaceBasis, classifier_basis, combined_basis,
                       coverage_distance, image_basis, verify_misalignment_bound,
                       verify_orthogonal_irrelevance)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
