import sys

from polydich.cli import main

sys.exit(main())
