"""
PANIC: an interpretable additive classifier over tabular features and 3D images.

Every class logit is a sum of a bias, one learned function per tabular
feature and the similarities of the image to class-specific prototypes,
so each prediction decomposes exactly into per-feature and per-prototype
contributions.
"""

__version__ = "1.0.0"
