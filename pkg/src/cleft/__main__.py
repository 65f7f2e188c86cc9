import sys

from cleft.cli import main

sys.exit(main())
