"""Entity prediction accuracy on the deterministic-recency corpus, with the always-new baseline.

    python scripts/entity_prediction.py --seeds 0 1 2
"""

import argparse
import json
import sys

from entitynlm.experiments import entity_prediction_run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--verbose", action="store_true", help="print the epoch log")
    args = ap.parse_args(argv)
    log = (lambda s: print(s, file=sys.stderr, flush=True)) if args.verbose else None
    for seed in args.seeds:
        print(json.dumps(entity_prediction_run(seed, log=log), sort_keys=True), flush=True)


if __name__ == "__main__":
    main()
