"""Exact marginals by enumeration vs importance sampling on tiny random models.

Prints, per document, the exact log P(X), the importance-sampled estimate at each N,
the relative error and the effective sample size.

    python scripts/enumeration.py --docs 10 --samples 100 1000 20000
"""

import argparse
import json
import math

import numpy as np

from entitynlm.evaluate import exact_marginal, importance_estimate, total_mass
from entitynlm.model import EntityNLM, ModelConfig


def micro_model(seed: int, vocab_size: int = 5, d: int = 4, l_max: int = 2) -> EntityNLM:
    cfg = ModelConfig(vocab_size, d_x=d, d_h=d, l_max=l_max, n_classes=2, sigma=0.0)
    return EntityNLM(cfg, np.arange(vocab_size) % 2, seed=seed)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--docs", type=int, default=10)
    ap.add_argument("--max-len", type=int, default=4)
    ap.add_argument("--samples", type=int, nargs="+", default=[100, 1000, 20000])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    for k in range(args.docs):
        model = micro_model(args.seed * 1000 + k)
        words = rng.integers(0, 5, size=int(rng.integers(1, args.max_len + 1))).tolist()
        exact = exact_marginal(model, words)
        row = {"doc": k, "words": words, "total_mass": total_mass(model, len(words)), "exact_log_p": exact}
        for n in args.samples:
            est = importance_estimate(model, words, n, np.random.default_rng(k), oracle=True)
            row[f"N={n}"] = {"log_p": est.estimate, "rel_err": abs(math.exp(est.estimate - exact) - 1), "ess": est.ess}
        print(json.dumps(row), flush=True)


if __name__ == "__main__":
    main()
