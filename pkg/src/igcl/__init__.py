"""Image-graph contrastive pretraining and evaluation at desk scale."""

__version__ = "0.1.0"
