"""Adaptive-width video-text encoders with a closed-form FLOPs model.

Importing the package is cheap; numpy loads with the submodules, so the CLI
can cap BLAS threads first.
"""

__version__ = "0.1.0"
