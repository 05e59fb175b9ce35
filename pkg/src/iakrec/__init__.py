"""Multi-domain recommender fine-tuning: a frozen multi-task backbone plus
per-domain variational encoder-decoder adapters, with the training, routing,
and evaluation machinery around them."""

__version__ = "0.1.0"
