"""Cross-architecture model stitching for the Small ResNet family."""

from .data import DatasetSplit, ImageBatch, augment, load_cifar10, make_synthetic
from .experiments import (
    PROFILES,
    MseStatsTable,
    SimilarityMatrix,
    StitchPair,
    TriangleStat,
    generate_images,
    mse_statistics,
    run_full_sweep,
    similarity_matrix,
    triangle_stat,
)
from .optim import Hyperparams, lr_at
from .stitching import (
    StitchedNetwork,
    StitchSpec,
    assemble,
    build_stitch,
    mean_pool,
    nearest_upsample,
    plan_stitch,
    stitch_between,
)
from .training import finite_difference_check, train_stitch_similarity, train_stitch_task
from .zoo import (
    ArchSpec,
    ModelHandle,
    StitchPoint,
    TensorShape,
    build_model,
    enumerate_archs,
    evaluate,
    forward_prefix,
    forward_suffix,
    load_checkpoint,
    save_checkpoint,
    stitch_points,
    train_network,
)

__version__ = "0.1.0"
