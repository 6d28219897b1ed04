"""Entry point for python -m scripts.nas_selection"""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
