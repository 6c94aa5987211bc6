"""Knee osteoarthritis KL-grade pipeline: CLAHE, diffusion augmentation, fine-tuned CNN, Grad-CAM."""

__version__ = "0.1.0"
