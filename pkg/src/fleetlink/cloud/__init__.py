from .node import CloudNode
from .filtering import aggregate_iteration, majority_filter

__all__ = ["CloudNode", "majority_filter", "aggregate_iteration"]
