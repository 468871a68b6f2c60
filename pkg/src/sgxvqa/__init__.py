"""Graph-based VQA with intrinsic hard-masked subgraph explanations."""

__version__ = "0.1.0"
