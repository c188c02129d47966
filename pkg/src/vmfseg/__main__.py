import sys

from vmfseg.cli import main

sys.exit(main())
