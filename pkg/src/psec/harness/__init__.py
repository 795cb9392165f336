"""Pipelines, regimes and the ``psec`` command line."""

from .config import RunConfig, load_config
from .report import RunReport

__all__ = ["RunConfig", "RunReport", "load_config"]
