"""Pose-annotated animal image dataset synthesis toolkit.

Subpackages cover the full batch pipeline: skeleton schemas and pose
validation, geometric pose perturbation, conditioning signals (pose maps
and prompts), a desk-scale diffusion scheduler, generation backends with
bounded-concurrency batching, keypoint-loss screening, hybrid dataset
assembly, and OKS-mAP / PCK evaluation.
"""

__version__ = "0.1.0"
