"""Desk-scale latent visual-thought distillation."""
__version__ = "0.1.0"
