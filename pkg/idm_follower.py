#!/usr/bin/env python3
"""
IDM-Follower command line.

Usage:
    python3 idm_follower.py simulate --n 1000 --seed 7 --out data/
    python3 idm_follower.py noise --data data/ --level middle --out data/middle
    python3 idm_follower.py train --data data/middle --mu 0.7 --out runs/hybrid
    python3 idm_follower.py eval --data data/middle --checkpoint runs/hybrid/checkpoint.bin --out runs/hybrid/eval
"""

import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
