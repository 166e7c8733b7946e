"""Masked face recognition through face inpainting.

Three stages: a mask detector, a latent-sampling inpainter that restores the
occluded region, and a hybrid CNN/ViT identity recognizer.
"""

__version__ = "0.1.0"
