"""Desk-scale laboratory for robust mutual learning.

Two student networks are taught indirectly through each other's mean
teachers while a prototype bank rectifies the pseudo labels they train on.
The package provides the network engine, augmentations, prototype
confidence, rectification, the training loop, data/metric utilities and a
CLI front end with reproducible experiment presets.
"""

__version__ = "0.1.0"
