"""Self-supervised pretraining with cross-context distillation between global and hypercolumn features."""

__version__ = "0.1.0"
