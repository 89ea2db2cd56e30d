"""Extract articulated, re-deformable parts from 2D sprite sheets."""

from .core import (
    CandidatePart,
    CorrespondenceMap,
    InputError,
    LabelMap,
    Pose,
    SelectionSolution,
    SpriteSheet,
    SuperpixelSegmentation,
)
from .pipeline import PipelineConfig, extract

__version__ = "0.1.0"

__all__ = [
    "CandidatePart",
    "CorrespondenceMap",
    "InputError",
    "LabelMap",
    "PipelineConfig",
    "Pose",
    "SelectionSolution",
    "SpriteSheet",
    "SuperpixelSegmentation",
    "extract",
]
