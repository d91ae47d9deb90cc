"""Allow running as ``python -m agtfp``."""

from agtfp.cli import main

main()
