import sys

from sdfrecon.cli import main

sys.exit(main())
