"""Allow `python -m mvcache`."""

import sys

from mvcache.cli import main

sys.exit(main())
