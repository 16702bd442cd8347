import sys

from yieldpaint.cli import main

sys.exit(main())
