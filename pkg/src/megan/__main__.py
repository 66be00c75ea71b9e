import sys

from megan.cli import main

sys.exit(main())
