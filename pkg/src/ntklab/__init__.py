"""NTK laboratory for few-shot class-incremental learning at desk scale."""

__version__ = "0.1.0"
