"""Few-shot segmentation with query-informed thresholding and prototype refinement."""

from _qseg import (  # noqa: F401
    Model,
    QsegError,
    anomaly_score_map,
    bilinear_resize,
    cluster_supervoxels,
    conv2d,
    dsc,
    evaluate,
    generate_dataset,
    hard_mask,
    load_tensor,
    masked_average_pool,
    preprocess,
    refine_prototype,
    save_tensor,
    soft_threshold,
    train,
)

__all__ = [
    "Model",
    "QsegError",
    "anomaly_score_map",
    "bilinear_resize",
    "cluster_supervoxels",
    "conv2d",
    "dsc",
    "evaluate",
    "generate_dataset",
    "hard_mask",
    "load_tensor",
    "masked_average_pool",
    "preprocess",
    "refine_prototype",
    "save_tensor",
    "soft_threshold",
    "train",
]
