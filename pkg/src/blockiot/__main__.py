import sys

from blockiot.cli import main

sys.exit(main())
