"""hemoloop: a desk-scale CT hemorrhage detection service with a human-feedback
refinement loop.

Studies are pushed over a framed TCP protocol, assembled into HU volumes, run
through a pluggable segmentation model (TTA, ensembling, thresholding, lesion
volumetry), and reported back. Reviewer annotations feed retraining rounds that
select and deploy improved model versions.
"""

__version__ = "0.1.0"
