import sys

from spikerep.cli import main

sys.exit(main())
