"""Video-to-event tokenization feeding a prompt-tuned frozen transformer."""

__version__ = "0.1.0"
