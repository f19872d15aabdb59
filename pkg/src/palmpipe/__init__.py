"""Contactless palmprint matching pipeline with a synthetic benchmark."""

__version__ = "0.1.0"

from .errors import PalmError  # noqa: E402
from .pipeline import PipelineConfig  # noqa: E402

__all__ = ["PalmError", "PipelineConfig", "__version__"]
