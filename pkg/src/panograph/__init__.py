"""Graph-based instance segmentation for LiDAR panoptic segmentation.

Pipeline: over-segment thing points with density clustering, embed each
cluster with sparse convolutions, classify the edges of the complete
cluster graph, merge connected clusters into instances, fuse with
semantics and score with panoptic quality.
"""

from panograph.errors import ConfigError, DataError, FormatError, PanographError, ShapeError, TrainingError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "FormatError", "PanographError", "ShapeError", "TrainingError", "__version__"]
