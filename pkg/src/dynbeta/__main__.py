import sys

from dynbeta.cli import main

sys.exit(main())
