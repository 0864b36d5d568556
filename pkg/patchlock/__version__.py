"""Version information for PatchLock."""

__version__ = "0.3.0"
__author__ = "PatchLock Developers"
__license__ = "MIT"
