import sys

from dualprune.cli import main

sys.exit(main())
