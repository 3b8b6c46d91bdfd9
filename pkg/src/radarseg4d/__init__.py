"""Five-view 4D radar heatmaps and TMVA4D person segmentation at desk scale."""

__version__ = "0.1.0"
