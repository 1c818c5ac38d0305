"""Keypoint detector and descriptor trained through a non-differentiable pose pipeline.

The network samples keypoints and matches, a RANSAC essential-matrix
estimator turns them into a relative pose, and REINFORCE moves the
network towards samples with small pose error.
"""

__version__ = "0.1.0"
