"""Skeleton-agnostic motion tokenization: BVH I/O, kinematics, graph encoder and tokenizer."""

__version__ = "0.1.0"
