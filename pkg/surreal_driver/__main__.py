#!/usr/bin/env python
import sys

from surreal_driver.cli import main

if __name__ == "__main__":
    sys.exit(main())
