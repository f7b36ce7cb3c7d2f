"""Run the four DCV cases and print the first-event estimates and the decay ratios.

Usage: python scripts/reproduce_dcv.py [output_dir] [extra --set overrides...]
"""

import sys

from delayadapt.cli import main

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "runs/dcv"
    extra = []
    for s in sys.argv[2:]:
        extra += ["--set", s]
    sys.exit(main(["reproduce-dcv", "-o", out, *extra]))
