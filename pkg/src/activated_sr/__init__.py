"""Activation-guided test-time adaptation for single-image super-resolution.

Pipeline: build a per-filter activation index over the training corpus,
predict once with the baseline SR network, retrieve the corpus images that
maximally activate the same feature-extractor filters as the prediction,
fine-tune the network on those images with the up-sampling stages frozen,
and predict again. The analysis module quantifies how fine-tuning moves the
network's filters toward a per-image overfit reference network.
"""

__version__ = "0.1.0"
