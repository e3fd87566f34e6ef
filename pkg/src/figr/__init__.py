"""FIGR: few-shot image generation via Reptile meta-training of a GAN."""

__version__ = "0.1.0"
