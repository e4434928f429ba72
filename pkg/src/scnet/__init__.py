"""Sparse causal voxel selection and ICA-based network analysis of
voxel-by-time recordings."""

__version__ = "0.1.0"

from .data_model import AtlasPartition, CoordinateTable, SubjectData, TemporalSplit  # noqa: E402
from .errors import ScnError  # noqa: E402

__all__ = ["AtlasPartition", "CoordinateTable", "ScnError", "SubjectData", "TemporalSplit", "__version__"]
