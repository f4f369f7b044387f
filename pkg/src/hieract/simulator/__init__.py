from .classifier import ToyClassifier, path_posterior, predict_levels, train_step
from .fusion_task import fusion_task
from .loop import RunConfig, RunReport, benchmark_config, run_active_learning
from .metrics import compute_miou
from .scene import PointCloudScene, generate_scene

__all__ = [
    "PointCloudScene",
    "RunConfig",
    "RunReport",
    "ToyClassifier",
    "benchmark_config",
    "compute_miou",
    "fusion_task",
    "generate_scene",
    "path_posterior",
    "predict_levels",
    "run_active_learning",
    "train_step",
]
