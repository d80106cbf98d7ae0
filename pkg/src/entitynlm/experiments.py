"""Desk-scale experiment harnesses shared by ``scripts/`` and the acceptance suite.

Each function is deterministic given its seed and returns a plain dict of results.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .corpus import SynthSpec, Vocabulary, build_vocab, encode_corpus, preprocess, synth_corpus
from .evaluate import (
    EntityProtocol,
    always_new_baseline,
    corpus_coref_scores,
    entity_prediction,
    perplexity_is,
)
from .rerank import base_score, gold_tree, grid_search, inject, kbest, rerank, simulate_pair_scores
from .train import TrainConfig, train

TOY_TRAIN = TrainConfig(optimizer="adam", lr=0.01, dropout=0.0, d_x=32, d_h=32, epochs=8, patience=3,
                        off_grid=True)
# longer, regularized runs: re-predicting an entity's name only emerges after several epochs
LM_TRAIN = replace(TOY_TRAIN, dropout=0.5, epochs=12, patience=12)

# Entities carry a per-document name ("adjective noun" drawn from small pools) that is
# repeated verbatim on every mention, so the text after an entity's first mention is
# predictable from that entity.
NAMES_SPEC = SynthSpec(num_docs=250, vocab_size=300, mean_entities=4.0, recurrence=0.6, recency=0.5,
                       adjective_rate=1.0, filler_rate=0.0, determiners=False, noun_share=0.05, adj_share=0.05)


@dataclass
class Split:
    vocab: Vocabulary
    train: list
    dev: list
    test: list


def make_split(spec: SynthSpec, seed: int, n_dev: int, n_test: int, min_count: int = 2) -> Split:
    docs = [preprocess(d) for d in synth_corpus(spec, seed)]
    n_train = len(docs) - n_dev - n_test
    vocab = build_vocab(docs[:n_train], min_count=min_count)
    enc = encode_corpus(docs, vocab)
    return Split(vocab, enc[:n_train], enc[n_train:n_train + n_dev], enc[n_train + n_dev:])


def _log(log: Callable[[str], None] | None, msg: str) -> None:
    if log:
        log(msg)


# language modelling ----------------------------------------------------------------

def lm_win(seed: int, spec: SynthSpec = NAMES_SPEC, config: TrainConfig = LM_TRAIN, n_samples: int = 100,
           n_dev: int = 25, n_test: int = 25, log=None) -> dict:
    """Held-out importance-sampled perplexity of EntityNLM vs the entity-blind ablation."""
    split = make_split(spec, seed, n_dev, n_test)
    out = {"seed": seed, "vocab_size": len(split.vocab)}
    for name, blind in (("entitynlm", False), ("entity_blind", True)):
        start = time.perf_counter()
        cfg = replace(config, seed=seed, entity_blind=blind)
        result = train(cfg, split.vocab, split.train, split.dev, log=log)
        rep = perplexity_is(result.model, split.test, n=n_samples, rng=seed)
        out[name] = rep.perplexity
        out[f"{name}_seconds"] = time.perf_counter() - start
        _log(log, f"seed {seed} {name}: held-out perplexity {rep.perplexity:.3f}")
    out["margin"] = out["entity_blind"] - out["entitynlm"]
    return out


# entity prediction -------------------------------------------------------------------

RECENCY_SPEC = SynthSpec(num_docs=150, vocab_size=300, mean_entities=4.0, recurrence=0.6, recency=1.0,
                         filler_rate=0.0)


def entity_prediction_run(seed: int, spec: SynthSpec = RECENCY_SPEC, config: TrainConfig = LM_TRAIN,
                          n_dev: int = 15, n_test: int = 30, protocol: EntityProtocol = EntityProtocol(),
                          log=None) -> dict:
    split = make_split(spec, seed, n_dev, n_test)
    result = train(replace(config, seed=seed), split.vocab, split.train, split.dev, log=log)
    model_acc = entity_prediction(result.model, split.test, protocol)
    base = always_new_baseline(split.test, protocol)
    return {"seed": seed, "accuracy": model_acc.accuracy, "always_new": base.accuracy,
            "predictions": model_acc.total}


# reranking -----------------------------------------------------------------------------

RERANK_SPEC = replace(NAMES_SPEC, num_docs=240, recur_all=True)


def _rerank_items(split_docs, seed: int, noise: float):
    rng = np.random.default_rng(seed)
    items = []
    for doc in split_docs:
        spans = doc.mentions  # (start, end, entity) for annotated (non-singleton) mentions
        if len(spans) < 2:
            continue
        mentions = [(s, e) for s, e, _ in spans]
        chains = [c for _, _, c in spans]
        ps = simulate_pair_scores(doc.id, len(doc.words), mentions, chains, rng, noise=noise)
        items.append((doc, ps, gold_tree(chains)))
    return items


def rerank_oracle(seed: int, spec: SynthSpec = RERANK_SPEC, config: TrainConfig = LM_TRAIN, k: int = 100,
                  noise: float = 1.0, n_dev: int = 20, n_test: int = 40, log=None) -> dict:
    """Gold trees injected into k-best lists from simulated noisy pair scores."""
    split = make_split(spec, seed, n_dev, n_test)
    model = train(replace(config, seed=seed), split.vocab, split.train, split.dev, log=log).model

    def scored(items):
        out = []
        for doc, ps, gold in items:
            kb = inject(kbest(ps, k), gold, base_score(ps, gold))
            res = rerank(model, doc.words, ps, kb)
            out.append((doc, ps, gold, kb, res))
        return out

    dev = scored(_rerank_items(split.dev, seed + 1, noise))
    test = scored(_rerank_items(split.test, seed + 2, noise))
    alpha, beta, dev_conll = grid_search([(r.order, kb.trees, gold.partition()) for _, _, gold, kb, r in dev])
    gold_first = 0
    base_pairs, lm_pairs, comb_pairs = [], [], []
    for doc, ps, gold, kb, res in test:
        gp = gold.partition()
        gold_first += kb.trees[res.best].roots() == gold.roots()
        base_pairs.append((gp, kb.trees[0].partition()))
        lm_pairs.append((gp, kb.trees[res.best].partition()))
        comb = rerank(model, doc.words, ps, kb, mode="combined", alpha=alpha, beta=beta)
        comb_pairs.append((gp, kb.trees[comb.best].partition()))
    return {
        "seed": seed,
        "documents": len(test),
        "gold_first": gold_first / max(len(test), 1),
        "alpha": alpha,
        "beta": beta,
        "dev_conll2": dev_conll,
        "base_conll2": corpus_coref_scores(base_pairs)["conll2"],
        "lm_conll2": corpus_coref_scores(lm_pairs)["conll2"],
        "combined_conll2": corpus_coref_scores(comb_pairs)["conll2"],
    }
