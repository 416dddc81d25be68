"""
Datasets: IDX ingestion, image preprocessing and task construction
"""

from .idx import load_idx, write_idx
from .preprocessing import downsample
from .tasks import (
    Task,
    TeacherKind,
    build_task,
    export_csv,
    image_gram_tensor,
    spatial_task,
    synthetic_task,
)

__all__ = [
    "Task",
    "TeacherKind",
    "build_task",
    "downsample",
    "export_csv",
    "image_gram_tensor",
    "load_idx",
    "spatial_task",
    "synthetic_task",
    "write_idx",
]
