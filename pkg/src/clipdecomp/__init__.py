"""Exact direct-effect decomposition of CLIP-ViT image representations.

The image representation of a CLIP vision transformer is an exact sum of
per-token, per-layer, per-head terms in the joint image-text space. This
package computes that ledger and builds analyses on top of it: mean
ablations, TextSpan head bases, zero-shot segmentation heatmaps, spurious
cue removal and head-specific retrieval.
"""

from clipdecomp.kernel import (
    DimensionError,
    gelu,
    layer_norm_affine,
    matmul,
    orthonormal_basis,
    softmax_row,
    variance,
)
from clipdecomp.archive import FormatError, load_archive, save_archive
from clipdecomp.model import (
    ImageInput,
    LayerWeights,
    ViTConfig,
    ViTModel,
    attention_weights,
    load_model,
    patch_embed,
    random_image,
    random_model,
    reference_forward,
    save_model,
)
from clipdecomp.decomposition import (
    AblationSpec,
    ClassBank,
    DecomposedRepresentation,
    MeanBank,
    ablate_terms,
    apply_ablation,
    build_mean_bank,
    decompose_image,
    head_contribution,
    reconstruct,
    token_contribution,
    zero_shot_classify,
)
from clipdecomp.textspan import (
    HeadBasis,
    TextEmbeddingBank,
    explained_variance,
    project_contribution,
    project_heads,
    project_rows_to_span,
    textspan,
)
from clipdecomp.applications import (
    Heatmap,
    RetrievalResult,
    SegmentationMetrics,
    bias_normalize,
    binarize,
    joint_heatmap,
    retrieve_by_head,
    seg_metrics,
    token_heatmap,
    worst_group_accuracy,
)

__version__ = "0.1.0"
