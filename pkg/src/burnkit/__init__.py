"""Self-supervised binary network training by distillation from a frozen FP extractor."""

__version__ = "0.1.0"
