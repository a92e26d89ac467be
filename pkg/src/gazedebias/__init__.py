"""Appearance-debiased gaze estimation with adversarial identity confusion and subject-wise Reptile."""

__version__ = "0.1.0"
