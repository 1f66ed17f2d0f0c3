import sys

from expost.cli import main

sys.exit(main())
