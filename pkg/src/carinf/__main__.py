import sys

from carinf.cli import main

sys.exit(main())
