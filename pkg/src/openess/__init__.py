"""Open-vocabulary event-based segmentation by cross-modal distillation."""

__version__ = "0.1.0"
