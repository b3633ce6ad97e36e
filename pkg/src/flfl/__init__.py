"""Desk-scale simulator for labels-at-server federated semi-supervised learning.

Modules:
    nn_core       flat-parameter MLP with batch norm, losses and hand-written backprop
    data          synthetic blobs, label split, Dirichlet partitions, augmentations
    fssl          pseudo-labels, adaptive thresholds, sharpness-aware consistency, local training
    aggregation   status-aware weights, weighted averaging, server momentum, static BN stats
    orchestrator  configuration, presets and the round loop
    metrics       pseudo-label diagnostics, test accuracy, CSV logs
"""
__version__ = "0.1.0"

from flfl._kernels import backend_name  # noqa: F401
