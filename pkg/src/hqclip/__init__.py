"""Caption refinement, multi-grained contrastive training and synthetic evaluation at desk scale."""

__version__ = "0.1.0"
