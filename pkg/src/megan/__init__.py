"""Mixture-of-experts GAN with straight-through Gumbel-Softmax generator routing."""

__version__ = "0.1.0"
