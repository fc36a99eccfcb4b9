"""Generalizable neural semantic fields at desk scale.

Fuses multi-view 2D semantic probability maps into 3D point semantics with
a learned soft-voting head, renders semantic maps through density or
truncated-SDF volume rendering, and trains end to end from 2D supervision
on procedurally generated labeled scenes.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, no_grad
from .cameras import Camera
from .scenes import Dataset, Scene, generate_dataset, load_dataset, save_dataset

__all__ = [
    "Tensor",
    "no_grad",
    "Camera",
    "Scene",
    "Dataset",
    "generate_dataset",
    "load_dataset",
    "save_dataset",
]
