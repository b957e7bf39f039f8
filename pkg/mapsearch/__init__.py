"""Surrogate-model-guided search over accelerator mappings."""

__version__ = "0.1.0"
