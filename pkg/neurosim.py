#!/usr/bin/env python3
"""
NeuroSim - processing element simulator
Command line launcher; see `python neurosim.py --help`.
"""

import os
import sys

# Make the `src` package importable when run from any directory
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.main import main

if __name__ == "__main__":
    sys.exit(main())
