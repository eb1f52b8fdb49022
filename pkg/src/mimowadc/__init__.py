"""Measurement-based MIMO identification and wide-area damping control."""

from .data import DataWindow, csv_export, csv_import
from .lti import RationalTf, StateSpaceModel

__version__ = "0.1.0"

__all__ = ["DataWindow", "RationalTf", "StateSpaceModel", "csv_export", "csv_import"]
