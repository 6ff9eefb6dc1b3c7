"""Adaptive fusion of images, depth and radar point clouds into body meshes.

The public surface is re-exported here; see the submodules for the pieces.
"""
from __future__ import annotations

from .baseline import BaselineFusion
from .config import DESK, PAPER, SLOTS, Profile, get_profile
from .fusion import AdaptiveFusion, MeshPrediction
from .geometry import BodyTemplate, Camera, build_template, mpjpe, mpve, pa_mpjpe, procrustes_align
from .sampling import Combination, combination_from_id, enumerate_combinations, mask_modalities
from .synthdata import Dataset, generate_sample, write_split
from .trainer import TrainConfig, compute_loss, evaluate, load_model, train

__version__ = "0.1.0"

__all__ = [
    "AdaptiveFusion", "BaselineFusion", "BodyTemplate", "Camera", "Combination", "DESK", "Dataset",
    "MeshPrediction", "PAPER", "Profile", "SLOTS", "TrainConfig", "build_template", "combination_from_id",
    "compute_loss", "enumerate_combinations", "evaluate", "generate_sample", "get_profile", "load_model",
    "mask_modalities", "mpjpe", "mpve", "pa_mpjpe", "procrustes_align", "train", "write_split",
]
