"""Utility classes for PatchLock.

This module provides the console logger used by the command-line tool and
the training loop, and the key directory that resolves where key files live.
"""

import logging
import os
from typing import List, Optional

KEY_DIR_ENV = "PATCHLOCK_KEY_DIR"
KEY_SUFFIX = ".plk"

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class Logger:
    """Console logger with keyword context.

    Keyword arguments passed to the log methods are rendered as ``key=value``
    pairs after the message, which keeps training and experiment logs greppable.

    Example:
        >>> log = Logger("PatchLock.train")
        >>> log.info("step", iteration=10, loss=0.52)
    """

    def __init__(self, name: str, level: Optional[str] = None, console: bool = False):
        """Initialize logger.

        Args:
            name: Logger name, normally under the ``PatchLock`` hierarchy
            level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL);
                inherited from the parent logger when omitted
            console: Attach a console handler to this logger
        """
        self.logger = logging.getLogger(name)
        if level is not None:
            self.logger.setLevel(getattr(logging, level.upper()))

        # One console handler per logger name, however many wrappers exist
        if console and not any(getattr(h, "_patchlock", False) for h in self.logger.handlers):
            console_handler = logging.StreamHandler()
            console_handler.setFormatter(logging.Formatter(LOG_FORMAT))
            console_handler._patchlock = True  # type: ignore[attr-defined]
            self.logger.addHandler(console_handler)

    @staticmethod
    def _format(message: str, context: dict) -> str:
        if not context:
            return message
        pairs = " ".join(f"{key}={_render(value)}" for key, value in context.items())
        return f"{message} {pairs}"

    def debug(self, message: str, **kwargs):
        """Log debug message with optional context."""
        if self.logger.isEnabledFor(logging.DEBUG):
            self.logger.debug(self._format(message, kwargs))

    def info(self, message: str, **kwargs):
        """Log info message with optional context."""
        if self.logger.isEnabledFor(logging.INFO):
            self.logger.info(self._format(message, kwargs))

    def warning(self, message: str, **kwargs):
        """Log warning message with optional context."""
        self.logger.warning(self._format(message, kwargs))

    def error(self, message: str, **kwargs):
        """Log error message with optional context."""
        self.logger.error(self._format(message, kwargs))


def _render(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def configure_logging(level: str = "INFO") -> Logger:
    """Attach the console handler to the ``PatchLock`` root logger.

    Args:
        level: Logging level name

    Returns:
        Logger wrapping the package root logger
    """
    return Logger("PatchLock", level, console=True)


class KeyDirectory:
    """Default location for key files.

    The directory comes from ``$PATCHLOCK_KEY_DIR`` and falls back to
    ``~/.patchlock/keys``. It is created on first write, not on construction.
    """

    def __init__(self, path: Optional[str] = None):
        """Initialize key directory.

        Args:
            path: Explicit directory; overrides the environment
        """
        if path is None:
            path = os.environ.get(KEY_DIR_ENV) or os.path.join("~", ".patchlock", "keys")
        self.path = os.path.expanduser(path)
        self.logger = logging.getLogger("PatchLock.KeyDirectory")

    def ensure(self) -> str:
        """Create the directory if needed.

        Returns:
            Directory path
        """
        os.makedirs(self.path, exist_ok=True)
        return self.path

    def resolve(self, name: str) -> str:
        """Resolve a key reference to a file path.

        Paths that exist, or that contain a directory component, are returned
        unchanged. A bare name is looked up inside the key directory, with the
        ``.plk`` suffix added when missing.

        Args:
            name: File path or bare key name

        Returns:
            Path to the key file (which may not exist yet)
        """
        if os.path.exists(name) or os.path.dirname(name):
            return name
        if not name.endswith(KEY_SUFFIX):
            name = name + KEY_SUFFIX
        resolved = os.path.join(self.path, name)
        self.logger.debug(f"Resolved key {name} to {resolved}")
        return resolved

    def list_keys(self) -> List[str]:
        """List key files in the directory.

        Returns:
            Sorted list of key file names
        """
        if not os.path.isdir(self.path):
            return []
        return sorted(
            f for f in os.listdir(self.path)
            if f.endswith(KEY_SUFFIX) and os.path.isfile(os.path.join(self.path, f))
        )
