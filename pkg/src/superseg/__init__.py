"""Weakly supervised 3D instance segmentation on superpoint graphs.

Oversegmentation, k-NN superpoint graphs, inter-superpoint affinity,
semantic-aware random-walk label propagation, volume-aware clustering, loss
evaluators and instance segmentation metrics. Network predictions are
supplied from files or by a ground-truth oracle.
"""

__version__ = "0.1.0"
