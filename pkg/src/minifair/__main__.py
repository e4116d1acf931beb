import sys

from minifair.cli import main

sys.exit(main())
