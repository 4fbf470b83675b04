"""Few-shot and standard image classification with jigsaw and rotation self-supervision."""

__version__ = "0.1.0"
