import sys

from gazedebias.cli import main

sys.exit(main())
