import sys

from dphfl.cli import main

sys.exit(main())
