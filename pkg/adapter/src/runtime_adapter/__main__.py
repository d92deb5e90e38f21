"""Entry point for ``python -m runtime_adapter``."""

import sys

from .serve import main

if __name__ == "__main__":
    sys.exit(main())
