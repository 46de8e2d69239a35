"""Language-guided multi-scene absolute camera pose regression at desk scale.

A self-contained stack: a float64 reverse-mode tensor engine, quaternion and
pose math, a vision-language fusion network with per-scene pose heads, the
homoscedastic multi-task objective, AdamW training with a cosine schedule,
a seeded synthetic multi-scene benchmark, ingestion of standard pose-file
formats, and a CLI producing delimited reports with rendered figures.
"""

__version__ = "0.1.0"

from .geometry import Pose
from .model import ForwardOutput, ModelConfig, ModelParams
from .training import MetricsReport, TrainConfig

__all__ = [
    "ForwardOutput",
    "MetricsReport",
    "ModelConfig",
    "ModelParams",
    "Pose",
    "TrainConfig",
    "__version__",
]
