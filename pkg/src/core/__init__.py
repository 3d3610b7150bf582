"""Glasshull Core Module"""
from .version import __version__, APP_NAME
from .config import RunConfig
from .errors import RefractionNeRFError

__all__ = ['__version__', 'APP_NAME', 'RunConfig', 'RefractionNeRFError']
