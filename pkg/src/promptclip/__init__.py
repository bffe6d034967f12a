"""Prompt-tuned dual-encoder contrastive training and zero-shot retrieval evaluation."""

__version__ = "0.1.0"
