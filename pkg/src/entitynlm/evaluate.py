"""Importance-sampled perplexity, enumeration oracles, entity prediction and
coreference scorers (MUC, B-cubed and their mean, reported as "CoNLL-2")."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Hashable, Iterable, NamedTuple, Sequence

import numpy as np

from .entity_state import OUTSIDE, EntityAnnotation, StateMachine, enumerate_trajectories, next_choices
from .errors import ConfigurationError, ContractError, NumericalError
from .model import DocState, Document, EntityNLM
from .tensor import logsumexp
from .train import as_document, doc_id

SCHEMA_VERSION = 1
LN2 = math.log(2.0)


def log_mean_exp(xs: Sequence[float]) -> float:
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size == 0:
        raise ContractError("log_mean_exp of an empty sequence")
    m = xs.max()
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.mean(np.exp(xs - m))))


def parallel_map(fn: Callable, items: Sequence, workers: int = 1) -> list:
    """Order-preserving map; ``workers > 1`` forks a process pool."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    import multiprocessing as mp

    with mp.get_context("fork").Pool(min(workers, len(items))) as pool:
        return pool.map(fn, items)


def oracle_model(model: EntityNLM) -> EntityNLM:
    """sigma = 0: every new entity starts exactly at normalize(r_1)."""
    return model if model.config.sigma == 0 else model.copy(sigma=0.0)


# importance sampling -------------------------------------------------------------


@dataclass
class ImportanceEstimate:
    n: int
    log_weights: np.ndarray
    estimate: float  # log P(X), natural log

    @property
    def ess(self) -> float:
        w = np.exp(self.log_weights - self.log_weights.max())
        return float(w.sum() ** 2 / (w * w).sum())


def importance_estimate(model: EntityNLM, words: Sequence[int], n: int, rng: np.random.Generator,
                        oracle: bool = False) -> ImportanceEstimate:
    """log P(X) ~= log (1/N) sum_i P(x, y_i) / Q(y_i | x), y_i ~ Q."""
    if n < 1:
        raise ConfigurationError(f"sample count must be >= 1, got {n}")
    if model.config.entity_blind:
        # no latent variables: the word likelihood is exact
        lp = float(sum(model.word_log_probs_blind(words)))
        return ImportanceEstimate(n, np.full(n, lp), lp)
    if oracle:
        model = oracle_model(model)
    hidden = model.hidden_states(words)
    cache: dict = {}
    lw = np.empty(n)
    for i in range(n):
        s = model.proposal_log_prob_and_sample(words, rng, joint=True, hidden=hidden, r_cache=cache)
        lw[i] = s.log_p - s.log_q
    if not np.any(np.isfinite(lw)):
        raise NumericalError("all importance weights are -inf")
    return ImportanceEstimate(n, lw, log_mean_exp(lw))


@dataclass
class PerplexityReport:
    perplexity: float
    log_prob: float  # natural log, summed over documents
    n_tokens: int
    n_samples: int
    per_document: list[float] = field(default_factory=list)
    ess: list[float] = field(default_factory=list)


def _estimate_doc(args, model, n, oracle):
    words, seed, name = args
    try:
        est = importance_estimate(model, words, n, np.random.default_rng(seed), oracle)
    except NumericalError as exc:
        raise NumericalError(f"document {name}: {exc}") from None
    return est.estimate, est.ess


def perplexity_is(model: EntityNLM, docs: Sequence, n: int = 100, rng: np.random.Generator | int = 0,
                  oracle: bool = False, workers: int = 1) -> PerplexityReport:
    """Word perplexity 2 ** (-(sum_d log2 P(X_d)) / T) with P(X_d) estimated by importance sampling."""
    base = rng if isinstance(rng, (int, np.integer)) else int(rng.integers(2**63))
    seeds = np.random.SeedSequence(int(base)).generate_state(len(docs), dtype=np.uint64)
    items = [(as_document(d).words, int(s), doc_id(d, k)) for k, (d, s) in enumerate(zip(docs, seeds))]
    results = parallel_map(partial(_estimate_doc, model=model, n=n, oracle=oracle), items, workers)
    per_doc = [r[0] for r in results]
    total = float(sum(per_doc))
    n_tokens = sum(len(w) for w, _, _ in items)
    if n_tokens == 0:
        raise ConfigurationError("perplexity of an empty corpus")
    return PerplexityReport(float(2.0 ** (-(total / LN2) / n_tokens)), total, n_tokens, n, per_doc,
                            [r[1] for r in results])


# exact oracles ---------------------------------------------------------------------

MAX_ORACLE_TOKENS = 8
MAX_ORACLE_LMAX = 2


def _guard(model: EntityNLM, n_tokens: int) -> None:
    if n_tokens > MAX_ORACLE_TOKENS or model.config.l_max > MAX_ORACLE_LMAX:
        raise ContractError(f"enumeration limited to <= {MAX_ORACLE_TOKENS} tokens and l_max <= "
                            f"{MAX_ORACLE_LMAX} (got {n_tokens}, {model.config.l_max})")


def exact_marginal(model: EntityNLM, words: Sequence[int]) -> float:
    """log P(X) summed over every valid (R, E, L) sequence, in oracle mode (sigma = 0)."""
    _guard(model, len(words))
    model = oracle_model(model)
    if model.config.entity_blind:
        return float(sum(model.word_log_probs_blind(words)))
    terms = [model.doc_log_prob(Document(list(words), list(a)))[0].item()
             for a in enumerate_trajectories(len(words), model.config.l_max)]
    return logsumexp(terms)


def annotation_log_probs(model: EntityNLM, state: DocState) -> list[tuple[EntityAnnotation, float]]:
    """Every admissible next annotation with log p(r, e, l | state); selects nothing.
    A pending new-entity embedding is created if needed (deterministic when sigma = 0)."""
    sm = state.sm
    if not sm.at_choice_point:
        return [(sm.forced(), 0.0)]
    if model.config.entity_blind:
        return [(OUTSIDE, 0.0)]
    lr = model.dist_r(state.h).data
    out = [(OUTSIDE, float(lr[0]))]
    reg = sm.registry
    model.ensure_candidate(reg, None)
    le = model.dist_e(state.h, reg, sm.position).data
    ll = {e: model.dist_l(state.h, reg.embeddings[e]).data for e in reg.admissible()}
    for a in next_choices(sm)[1:]:
        out.append((a, float(lr[1] + le[a.e - 1] + ll[a.e][a.l - 1])))
    return out


def total_mass(model: EntityNLM, n_tokens: int) -> float:
    """Sum of P(X, R, E, L) over every word sequence of length ``n_tokens`` and every
    valid annotation (depth-first over prefixes).  Equals 1 for a proper model."""
    _guard(model, n_tokens)
    model = oracle_model(model)
    V = model.config.vocab_size

    def rec(state: DocState, depth: int) -> float:
        if depth == n_tokens:
            return 1.0
        mass = 0.0
        for a, lp_a in annotation_log_probs(model, state):
            chosen = state.copy()
            if a.r == 1 and state.sm.at_choice_point:
                model.select_entity(chosen, a.e)
            lx = model.word_log_probs(chosen.h, chosen.e_current)
            for w in range(V):
                nxt = chosen.copy()
                model.advance(nxt, a, w)
                mass += math.exp(lp_a + lx[w]) * rec(nxt, depth + 1)
        return mass

    return rec(model.initial_state(), 0)


# entity prediction ------------------------------------------------------------------


@dataclass(frozen=True)
class EntityProtocol:
    skip_sentences: int = 3
    max_predictions: int = 30  # per document


@dataclass
class PredictionResult:
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else float("nan")


def _prediction_slots(doc, protocol: EntityProtocol):
    """Yield (t, annotation, new_index) at each scored gold mention start."""
    sentence_ids = getattr(doc, "sentence_ids", None)
    d = as_document(doc)
    sm = StateMachine()
    count = 0
    for t, a in enumerate(d.annotations):
        a = EntityAnnotation(*a)
        if sm.at_choice_point and a.r == 1 and count < protocol.max_predictions:
            sent = sentence_ids[t] if sentence_ids is not None else protocol.skip_sentences
            if sent >= protocol.skip_sentences:
                count += 1
                yield t, a, sm.registry.new_index
        sm.step(a)


def always_new_baseline(docs: Sequence, protocol: EntityProtocol = EntityProtocol()) -> PredictionResult:
    correct = total = 0
    for doc in docs:
        for _, a, new in _prediction_slots(doc, protocol):
            total += 1
            correct += a.e == new
    return PredictionResult(correct, total)


def entity_prediction(model: EntityNLM, docs: Sequence, protocol: EntityProtocol = EntityProtocol()
                      ) -> PredictionResult:
    """Teacher-forced pass; at each scored mention start predict argmax p(e | history)."""
    if model.config.entity_blind:
        raise ContractError("the entity-blind model cannot predict entities")
    correct = total = 0
    for doc in docs:
        d = as_document(doc)
        slots = {t for t, _, _ in _prediction_slots(doc, protocol)}
        state = model.initial_state()
        noise = np.random.default_rng(0)
        for t, (a, w) in enumerate(zip(d.annotations, d.words)):
            a = EntityAnnotation(*a)
            if state.sm.at_choice_point and a.r == 1:
                model.ensure_candidate(state.sm.registry, noise)
                if t in slots:
                    pred = int(np.argmax(model.dist_e(state.h, state.sm.registry, t).data)) + 1
                    total += 1
                    correct += pred == a.e
                model.select_entity(state, a.e)
            model.advance(state, a, w)
    return PredictionResult(correct, total)


# coreference scorers -----------------------------------------------------------------


@dataclass(frozen=True)
class CorefPartition:
    """A partition of mentions (any hashable ids) into clusters."""

    clusters: tuple[frozenset, ...]

    @classmethod
    def from_clusters(cls, clusters: Iterable[Iterable[Hashable]]) -> "CorefPartition":
        cs = [frozenset(c) for c in clusters]
        seen: set = set()
        for c in cs:
            if not c or seen & c:
                raise ContractError("clusters must be non-empty and disjoint")
            seen |= c
        return cls(tuple(sorted(cs, key=lambda c: sorted(map(repr, c)))))

    @classmethod
    def from_labels(cls, labels: dict) -> "CorefPartition":
        groups: dict = {}
        for m, k in labels.items():
            groups.setdefault(k, set()).add(m)
        return cls.from_clusters(groups.values())

    @property
    def mentions(self) -> frozenset:
        return frozenset().union(*self.clusters) if self.clusters else frozenset()

    def cluster_of(self) -> dict:
        return {m: c for c in self.clusters for m in c}


def _same_mentions(gold: CorefPartition, sys: CorefPartition) -> None:
    if gold.mentions != sys.mentions:
        raise ContractError("gold and system partitions cover different mention sets")


class PRF(NamedTuple):
    precision: float
    recall: float
    f1: float

    @classmethod
    def of(cls, p: float, r: float) -> "PRF":
        return cls(p, r, 2 * p * r / (p + r) if p + r > 0 else 0.0)


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def _muc_counts(key: CorefPartition, response: CorefPartition) -> tuple[int, int]:
    """Numerator and denominator of MUC recall of ``response`` against ``key``."""
    where = response.cluster_of()
    num = den = 0
    for c in key.clusters:
        parts = {where[m] for m in c}
        num += len(c) - len(parts)
        den += len(c) - 1
    return num, den


def muc_f1(gold: CorefPartition, sys: CorefPartition) -> PRF:
    _same_mentions(gold, sys)
    rn, rd = _muc_counts(gold, sys)
    pn, pd = _muc_counts(sys, gold)
    return PRF.of(_ratio(pn, pd), _ratio(rn, rd))


def _b3_sum(key: CorefPartition, response: CorefPartition) -> float:
    where = response.cluster_of()
    return sum(len(c & where[m]) / len(c) for c in key.clusters for m in c)


def b_cubed_f1(gold: CorefPartition, sys: CorefPartition) -> PRF:
    _same_mentions(gold, sys)
    n = len(gold.mentions)
    return PRF.of(_ratio(_b3_sum(sys, gold), n), _ratio(_b3_sum(gold, sys), n))


def conll_score(gold: CorefPartition, sys: CorefPartition) -> float:
    """Mean of MUC and B-cubed F1 ("CoNLL-2"; no CEAF-e)."""
    return (muc_f1(gold, sys).f1 + b_cubed_f1(gold, sys).f1) / 2


def corpus_coref_scores(pairs: Sequence[tuple[CorefPartition, CorefPartition]]) -> dict[str, PRF | float]:
    """Corpus-level MUC (pooled link counts) and B-cubed (pooled over mentions)."""
    rn = rd = pn = pd = 0
    b_r = b_p = 0.0
    n = 0
    for gold, sys in pairs:
        _same_mentions(gold, sys)
        a, b = _muc_counts(gold, sys)
        c, d = _muc_counts(sys, gold)
        rn, rd, pn, pd = rn + a, rd + b, pn + c, pd + d
        b_r += _b3_sum(gold, sys)
        b_p += _b3_sum(sys, gold)
        n += len(gold.mentions)
    muc = PRF.of(_ratio(pn, pd), _ratio(rn, rd))
    b3 = PRF.of(_ratio(b_p, n), _ratio(b_r, n))
    return {"muc": muc, "b_cubed": b3, "conll2": (muc.f1 + b3.f1) / 2}


def paired_bootstrap(a: Sequence[float], b: Sequence[float], n_resamples: int = 1000,
                     rng: np.random.Generator | None = None) -> float:
    """Fraction of document resamples in which system ``a`` does not beat ``b``
    on the mean per-document score (a one-sided p-value estimate)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or a.size == 0:
        raise ContractError("paired bootstrap needs two equal-length non-empty score lists")
    rng = rng if rng is not None else np.random.default_rng(0)
    idx = rng.integers(0, a.size, size=(n_resamples, a.size))
    diffs = (a[idx] - b[idx]).mean(axis=1)
    return float(np.mean(diffs <= 0))


# reports ----------------------------------------------------------------------------


def report_record(metric: str, value: float, n: int | None = None, seed: int | None = None,
                  config_hash: str | None = None, **extra) -> dict:
    rec = {"schema_version": SCHEMA_VERSION, "metric": metric, "value": value, "N": n, "seed": seed,
           "config_hash": config_hash}
    rec.update(extra)
    return rec


def write_report(records: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
