"""Graph neural diffusion: attention-driven heat flow on graphs as a neural ODE."""
from .attention import AttentionOperator, AttentionParams, attention, shift_operator
from .data import Dataset, load_dataset, save_dataset, synth_grid_image, synth_sbm
from .graph import EdgeSet, Graph
from .integrators import SchemeConfig, integrate
from .model import GrandModel, ModelConfig, TrainConfig, train
from .rewiring import RewireConfig

__all__ = [
    "AttentionOperator", "AttentionParams", "attention", "shift_operator",
    "Dataset", "load_dataset", "save_dataset", "synth_grid_image", "synth_sbm",
    "EdgeSet", "Graph", "SchemeConfig", "integrate",
    "GrandModel", "ModelConfig", "TrainConfig", "train", "RewireConfig",
]
