import sys

from starformer.cli import main

sys.exit(main())
