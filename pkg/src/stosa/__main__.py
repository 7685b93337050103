"""Allow ``python -m stosa``."""
import sys

from .cli import main

sys.exit(main())
