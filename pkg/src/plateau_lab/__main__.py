import sys

from plateau_lab.cli import main

sys.exit(main())
