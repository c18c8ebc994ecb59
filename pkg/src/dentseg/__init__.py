"""Dent segmentation on 3D surface scans.

Synthetic labelled surfaces, scanner-noise replay, quadric residual
preprocessing and a small fully convolutional network trained with a
built-in reverse-mode engine.
"""
__version__ = "0.1.0"
