"""Incremental camera pose recovery from per-pixel pointmaps."""

__version__ = "0.1.0"

from .geometry import Intrinsics, Pose, SimTransform, align_and_evaluate, project, umeyama_align  # noqa: E402,F401
from .pipeline import PipelineConfig, load_config, run_full  # noqa: E402,F401
