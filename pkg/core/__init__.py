"""stdown: spatio-temporal soil-moisture downscaling toolkit."""

from core.stdown_core import __version__

__all__ = ["__version__"]
