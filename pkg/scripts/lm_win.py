"""Held-out perplexity of EntityNLM vs the entity-blind ablation on the names corpus.

    python scripts/lm_win.py --seeds 0 1 2 [--samples 100]
"""

import argparse
import json
import statistics
import sys

from entitynlm.experiments import lm_win


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--samples", type=int, default=100, help="importance samples per document")
    ap.add_argument("--verbose", action="store_true", help="print the epoch log")
    args = ap.parse_args(argv)
    log = (lambda s: print(s, file=sys.stderr, flush=True)) if args.verbose else None
    runs = []
    for seed in args.seeds:
        run = lm_win(seed, n_samples=args.samples, log=log)
        runs.append(run)
        print(json.dumps(run, sort_keys=True), flush=True)
    print(json.dumps({"median_margin": statistics.median(r["margin"] for r in runs)}))


if __name__ == "__main__":
    main()
