"""Unified 3D point-cloud segmentation at desk scale.

One trained model produces instance, semantic and panoptic segmentations of
an annotated point cloud. The package is self-contained: a small reverse-mode
autodiff engine, a synthetic scene generator, segment pooling, a transformer
query decoder, two proposal-to-ground-truth matchers, evaluation metrics, a
trainer and a batch CLI.
"""

__version__ = "0.1.0"
