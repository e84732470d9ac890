"""Cross-media knowledge transfer between two labelled image/text domains."""
__version__ = "0.1.0"
