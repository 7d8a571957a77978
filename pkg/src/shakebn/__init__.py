"""Shaking regularization and batch-normalization placement laboratory."""

from . import analysis, blocks, bnlstm, cli, data_io, normalization, shaking, tensor, training, verify

__all__ = ["analysis", "blocks", "bnlstm", "cli", "data_io", "normalization",
           "shaking", "tensor", "training", "verify"]

__version__ = "0.1.0"
