"""Single-language vocabulary extraction for multilingual SentencePiece models."""

__version__ = "0.1.0"
