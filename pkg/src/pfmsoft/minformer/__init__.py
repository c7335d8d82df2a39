"""Reduced transformer-encoder variants: attention algebra, training, capacity analysis."""

__author__ = "Chad Lowe"
__email__ = "pfmsoft.dev@gmail.com"
# The short X.Y.Z version.
__version__ = "0.1.0"
# The full version, including alpha/beta/rc tags.
__release__ = __version__
