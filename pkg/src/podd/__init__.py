"""podd: distill an image dataset into one shared poster plus soft labels.

The poster is a single pixel canvas smaller than one image per class.
Overlapping patches cut from it, each with a soft label, train compact
classifiers nearly as well as far larger distilled sets.  The package
exposes the pipeline both as composable functions and as sklearn-style
estimators (PosterDistiller, ClassPlacer, ConvNetClassifier).
"""

from .data import (
    LabeledDataset,
    SyntheticSpec,
    batch_iterator,
    class_mean_embeddings,
    generate_synthetic,
    load_binary_dataset,
    save_binary_dataset,
)
from .distillation import (
    DistillConfig,
    DistillState,
    distill,
    expand,
    outer_step,
    sample_unroll_length,
)
from .estimators import PosterDistiller
from .evaluation import (
    EvalProtocol,
    EvalResult,
    baseline_noise_poster,
    baseline_random_coreset,
    coreset_budget,
    evaluate_poster,
    evaluate_real_images,
    evaluate_training_set,
)
from .geometry import (
    DatasetMeta,
    DistillBudget,
    ExtractionSpec,
    Poster,
    accumulate_patch_gradients,
    extract_patches,
    extraction_spec,
    init_poster,
    pixel_budget,
    poster_dims,
)
from .labeling import (
    fixed_label,
    fixed_patch_labels,
    init_label_tensor,
    learned_label,
    learned_patch_labels,
    project_labels,
    upsample_class_grid,
)
from .models import ConvNetClassifier, ConvNetSpec
from .ordering import (
    ClassOrder,
    ClassPlacer,
    EmbeddingSet,
    cosine_distance_matrix,
    exhaustive_best_order,
    greedy_place,
    ordering_score,
    zigzag_traversal,
)

__version__ = "0.1.0"

__all__ = [
    "LabeledDataset",
    "SyntheticSpec",
    "batch_iterator",
    "class_mean_embeddings",
    "generate_synthetic",
    "load_binary_dataset",
    "save_binary_dataset",
    "DistillConfig",
    "DistillState",
    "distill",
    "expand",
    "outer_step",
    "sample_unroll_length",
    "PosterDistiller",
    "EvalProtocol",
    "EvalResult",
    "baseline_noise_poster",
    "baseline_random_coreset",
    "coreset_budget",
    "evaluate_poster",
    "evaluate_real_images",
    "evaluate_training_set",
    "DatasetMeta",
    "DistillBudget",
    "ExtractionSpec",
    "Poster",
    "accumulate_patch_gradients",
    "extract_patches",
    "extraction_spec",
    "init_poster",
    "pixel_budget",
    "poster_dims",
    "fixed_label",
    "fixed_patch_labels",
    "init_label_tensor",
    "learned_label",
    "learned_patch_labels",
    "project_labels",
    "upsample_class_grid",
    "ConvNetClassifier",
    "ConvNetSpec",
    "ClassOrder",
    "ClassPlacer",
    "EmbeddingSet",
    "cosine_distance_matrix",
    "exhaustive_best_order",
    "greedy_place",
    "ordering_score",
    "zigzag_traversal",
    "__version__",
]
