"""Graph-attention refinement of 3D Gaussian scenes for semantic occupancy.

The public surface mirrors the processing chain: scene types and synthetic
scenes, neighbor graphs, attention kernels, dual-graph fusion, dynamic/static
decoupled attention, splatting with IoU metrics, reverse-mode gradients with
AdamW, and the training/ablation harness.
"""

from .attention import (
    AttentionOutput,
    LayerParams,
    cross_attention,
    gaussian_refine,
    neighbor_attention,
)
from .autodiff import GradientTape, backward, fd_check
from .decouple import DecoupleMasks, IndexedSubset, decouple, dsdga, semantic_scores, split_masks
from .estimator import OccupancyRefiner
from .exceptions import (
    DegenerateSceneError,
    EmptyContextError,
    GsoccError,
    InvalidGaussianError,
    InvalidInputError,
    InvalidParameterError,
    InvalidTapeError,
    NumericInputError,
)
from .fusion import GraphConfig, MgaConfig, adaptive_fuse, dgga_layer, mga
from .graph import (
    NeighborIndex,
    cosine_topM,
    knn_adaptive_radius,
    knn_geometric,
    pairwise_sq_dist,
)
from .harness import AblationTable, EvalReport, TrainConfig, ablation_run, bench, eval_report, train
from .metrics import ConfusionCounts, confusion, iou_miou
from .optim import OptimState, optimizer_step
from .pipeline import PipelineConfig, init_params, run_pipeline
from .scene import (
    Gaussian,
    GaussianSet,
    GridSpec,
    Layout,
    SemanticTaxonomy,
    VoxelGrid,
    covariance,
    validate_set,
)
from .splat import SplatConfig, SplatReport, splat
from .synth import SceneSpec, gen_scene

__version__ = "0.1.0"

__all__ = sorted(
    name for name, obj in globals().items()
    if not name.startswith("_") and getattr(obj, "__module__", "").startswith("gsocc")
)
