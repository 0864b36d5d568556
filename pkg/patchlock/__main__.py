"""Allow ``python -m patchlock``."""

import sys

from .cli import main

sys.exit(main())
