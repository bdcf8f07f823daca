"""Sparse-view radiance-field reconstruction toolkit.

Feature volumes are factorized into per-axis vector/matrix grids; those grids
are either optimized directly or produced by untrained convolutional
generators fed frozen noise, which regularizes few-view fits. Everything
trains through a small numpy-backed reverse-mode autodiff engine.
"""

__version__ = "0.1.0"
