import sys

from bxv.cli import main

sys.exit(main())
