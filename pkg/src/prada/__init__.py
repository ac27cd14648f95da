"""Prompt-assisted domain-adversarial fine-tuning for chain-of-thought distillation, at desk scale."""

__version__ = "0.1.0"
