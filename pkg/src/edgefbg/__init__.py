"""Eccentric-FBG fiber shape sensing laboratory.

Spectral simulator with switchable physical effects, intensity and
dictionary baselines, a from-scratch convolutional regressor, perturbation
saliency, evaluation metrics, and a reproducible CLI toolkit.
"""

__version__ = "0.1.0"
