import sys

from gramclust.cli import main

sys.exit(main())
