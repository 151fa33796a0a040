"""Snapshot spectral imaging simulator and focal-modulation reconstruction network."""

__version__ = "0.1.0"

from .tensor import DiffTensor, ShapeError, ContractError, no_grad, count_macs

__all__ = ["DiffTensor", "ShapeError", "ContractError", "no_grad", "count_macs"]
