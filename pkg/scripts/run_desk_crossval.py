"""Desk-scale cross-validation on a synthetic corpus.

Generates 25 phantoms (unless the corpus exists), trains 2 folds x 1 run with
the desk preset and prints the fold table and the test-set submissions.

    python scripts/run_desk_crossval.py --out runs/desk
"""

import argparse
import sys
import time
from pathlib import Path

from hnseg.cli import main


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--count", type=int, default=25)
    p.add_argument("--config", help="JSON overlay on the desk preset")
    return p.parse_args()


if __name__ == "__main__":
    args = parse_args()
    out = Path(args.out)
    argv = ["crossval", "--preset", "desk", "--phantom-corpus", str(out / "raw"), "--count", str(args.count),
            "--out", str(out / "cv"), "--log-level", "INFO"]
    if args.config:
        argv += ["--config", args.config]
    t0 = time.time()
    code = main(argv)
    print(f"elapsed {(time.time() - t0) / 60:.1f} min", file=sys.stderr)
    sys.exit(code)
