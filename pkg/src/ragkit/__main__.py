"""Allow ``python -m ragkit`` as an alias for the ``ragkit`` command."""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
