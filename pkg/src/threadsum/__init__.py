"""Thread-aware conversation summarization: corpus, model, training, decoding."""

__version__ = "0.1.0"
