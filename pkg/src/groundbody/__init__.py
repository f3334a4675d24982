"""Casualty detection from ground-projected point-cloud heightmaps.

Organized depth clouds are reduced to a height-above-ground image, blobs are
cropped into 28x28 patches and classified by a small CNN. Synthetic data,
augmentation and mix search live alongside.
"""

__version__ = "0.1.0"
