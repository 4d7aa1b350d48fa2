"""Cross-domain self-supervised pretraining for image-based regression prognosis."""

__version__ = "0.1.0"
