"""Longitudinal report generation with prior-exam alignment and difference-aware fusion,
built on a small numpy autodiff engine and trained on a synthetic corpus."""

from .config import RunConfig
from .system import ReportModel

__all__ = ["RunConfig", "ReportModel"]
__version__ = "0.1.0"
