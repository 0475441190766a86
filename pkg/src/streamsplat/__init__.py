"""Streaming object reconstruction with Gaussian primitives and a dual-key memory."""

from .config import Config, PipelineConfig, load_config
from .memory import MemoryBank
from .pipeline import Pipeline, baseline_fusion, run_sequence
from .rasterizer import RenderSettings, render
from .types import CameraIntrinsics, CameraPose, FrameObservation, GaussianField

__version__ = "0.1.0"

__all__ = [
    "Config", "PipelineConfig", "load_config", "MemoryBank", "Pipeline", "baseline_fusion", "run_sequence",
    "RenderSettings", "render", "CameraIntrinsics", "CameraPose", "FrameObservation", "GaussianField",
]
