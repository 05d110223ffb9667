"""Near-online video instance segmentation on synthetic occlusion videos."""

__version__ = "0.1.0"
