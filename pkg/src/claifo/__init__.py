"""Contrastive latent adversarial imitation from videos under visual mismatch."""

__version__ = "0.1.0"
