#!/usr/bin/env python3
"""
SKPD command line entry point

Usage:
    python scripts/skpd.py verify
    python scripts/skpd.py fit --config experiments/quick_fit.cfg --out output/quick
    python scripts/skpd.py --help
"""

import sys
from pathlib import Path

# Add project root to path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from core.cli import main


if __name__ == '__main__':
    sys.exit(main())
