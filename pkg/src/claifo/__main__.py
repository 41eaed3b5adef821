import sys

from claifo.cli import main

sys.exit(main())
