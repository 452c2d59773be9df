"""Single-image voxel reconstruction with adversarial domain adaptation."""

from ._voxadapt import (
    Dataset,
    DatasetConfig,
    TrainConfig,
    Trainer,
    TrainState,
    VoxadaptError,
    cli,
    compute_iou,
    compute_iou_aligned,
    conv,
    convergence_measure,
    d2_update,
    d3_update,
    edge_density,
    render_view,
    stylize_real,
)

__all__ = [
    "Dataset",
    "DatasetConfig",
    "TrainConfig",
    "Trainer",
    "TrainState",
    "VoxadaptError",
    "cli",
    "compute_iou",
    "compute_iou_aligned",
    "conv",
    "convergence_measure",
    "d2_update",
    "d3_update",
    "edge_density",
    "render_view",
    "stylize_real",
]
