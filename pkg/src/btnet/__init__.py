"""Batch-attention image classifier at desk scale.

Subpackages are imported explicitly (``from btnet import autodiff``,
``from btnet.model import BTNModel``, ...); nothing heavy is pulled in
at package import time so entry points can pin BLAS thread counts first.
"""

__version__ = "0.1.0"
