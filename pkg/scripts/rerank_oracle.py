"""Rerank k-best coreference lists (gold tree injected) built from noisy simulated pair scores.

    python scripts/rerank_oracle.py --seeds 0 --k 100 --noise 1.0
"""

import argparse
import json
import sys

from entitynlm.experiments import rerank_oracle


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--k", type=int, default=100)
    ap.add_argument("--noise", type=float, default=1.0, help="std of the pair-score noise")
    ap.add_argument("--verbose", action="store_true", help="print the epoch log")
    args = ap.parse_args(argv)
    log = (lambda s: print(s, file=sys.stderr, flush=True)) if args.verbose else None
    for seed in args.seeds:
        print(json.dumps(rerank_oracle(seed, k=args.k, noise=args.noise, log=log), sort_keys=True), flush=True)


if __name__ == "__main__":
    main()
