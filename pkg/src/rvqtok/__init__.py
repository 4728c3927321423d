"""Residual-vector-quantization tokenizer and masked-modeling toolkit."""

__version__ = "0.1.0"
