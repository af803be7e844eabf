"""Dynamic scene reconstruction with anchor-based neural Gaussians and a HexPlane deformation field."""

from .checkpoint import load_checkpoint, restore_trainer, save_checkpoint
from .dataset import Dataset, SyntheticSpec, generate_synthetic_scene, load_dataset, write_dataset
from .export import export_gaussians
from .model import NeuralVoxelModel
from .renderer import Camera, rasterize, rasterize_reference
from .training import TrainConfig, Trainer, evaluate, scaled_config

__version__ = "0.1.0"

__all__ = [
    "Camera", "Dataset", "NeuralVoxelModel", "SyntheticSpec", "TrainConfig", "Trainer",
    "evaluate", "export_gaussians", "generate_synthetic_scene", "load_checkpoint", "load_dataset",
    "rasterize", "rasterize_reference", "restore_trainer", "save_checkpoint", "scaled_config",
    "write_dataset",
]
