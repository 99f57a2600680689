import sys

from onebit.bench.cli import main

sys.exit(main())
