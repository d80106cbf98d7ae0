"""Coreference reranking: pairwise antecedent scores -> approximate k-best antecedent
trees -> rescoring with the generative model.

Pair-score file format (UTF-8, tab separated, one record per line)::

    doc   <doc_id>  <n_tokens>  <start>:<end>,<start>:<end>,...   (mentions in order, end inclusive)
    pair  <doc_id>  <j>  <i>  <score>                             (antecedent i < j, or i = "eps")

Every ``pair`` line must follow its ``doc`` line; missing pairs are errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .entity_state import L_MAX, EntityAnnotation, spans_to_annotations
from .errors import ConfigurationError, ContractError, IngestionError
from .evaluate import CorefPartition, corpus_coref_scores
from .model import Document, EntityNLM

EPS = None  # the empty antecedent
DEFAULT_K = 100


@dataclass
class PairScores:
    doc_id: str
    n_tokens: int
    mentions: list[tuple[int, int]]
    antecedent: list[np.ndarray]  # antecedent[j][i] = score(m_j, m_i), i < j
    empty: np.ndarray  # empty[j] = score(m_j, eps)

    def __post_init__(self):
        n = len(self.mentions)
        if len(self.antecedent) != n or self.empty.shape != (n,):
            raise ContractError(f"{self.doc_id}: score arrays do not match {n} mentions")
        for j, row in enumerate(self.antecedent):
            if row.shape != (j,):
                raise ContractError(f"{self.doc_id}: mention {j} needs {j} antecedent scores, got {row.shape}")
            if not np.all(np.isfinite(row)):
                raise ContractError(f"{self.doc_id}: non-finite score for mention {j}")
        if not np.all(np.isfinite(self.empty)):
            raise ContractError(f"{self.doc_id}: non-finite empty-antecedent score")

    def __len__(self) -> int:
        return len(self.mentions)

    def score(self, j: int, i: int | None) -> float:
        return float(self.empty[j] if i is None else self.antecedent[j][i])


@dataclass(frozen=True)
class AntecedentTree:
    antecedents: tuple[int | None, ...]

    def __post_init__(self):
        for j, a in enumerate(self.antecedents):
            if a is not None and not 0 <= a < j:
                raise ContractError(f"antecedent {a} of mention {j} does not precede it")

    def roots(self) -> tuple[int, ...]:
        """Chain id per mention: the index of the chain's first mention."""
        out: list[int] = []
        for j, a in enumerate(self.antecedents):
            out.append(j if a is None else out[a])
        return tuple(out)

    def partition(self) -> CorefPartition:
        return CorefPartition.from_labels(dict(enumerate(self.roots())))

    def replace(self, j: int, a: int | None) -> "AntecedentTree":
        ants = list(self.antecedents)
        ants[j] = a
        return AntecedentTree(tuple(ants))


def base_score(ps: PairScores, tree: AntecedentTree) -> float:
    return float(sum(ps.score(j, a) for j, a in enumerate(tree.antecedents)))


def greedy_decode(ps: PairScores) -> AntecedentTree:
    """Per-mention argmax; ties go to the closer antecedent, and eps only wins outright."""
    ants: list[int | None] = []
    for j in range(len(ps)):
        best, best_score = None, -np.inf
        for i in range(j - 1, -1, -1):
            if ps.antecedent[j][i] > best_score:
                best, best_score = i, ps.antecedent[j][i]
        if ps.empty[j] > best_score:
            best = None
        ants.append(best)
    return AntecedentTree(tuple(ants))


@dataclass
class KBestList:
    entries: list[tuple[AntecedentTree, float]]
    n_distinct: int

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def trees(self) -> list[AntecedentTree]:
        return [t for t, _ in self.entries]


def candidate_swaps(ps: PairScores, tree: AntecedentTree) -> list[tuple[float, int, int | None]]:
    """All single-antecedent changes with their score gap, ascending by
    (gap, mention, antecedent) with eps ordered after every real antecedent."""
    swaps = []
    for j, a in enumerate(tree.antecedents):
        best = ps.score(j, a)
        for i in [*range(j), None]:
            if i != a:
                swaps.append((best - ps.score(j, i), j, i))
    swaps.sort(key=lambda s: (s[0], s[1], s[2] if s[2] is not None else s[1]))
    return swaps


def kbest(ps: PairScores, k: int = DEFAULT_K) -> KBestList:
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    greedy = greedy_decode(ps)
    entries = [(greedy, base_score(ps, greedy))]
    seen = {greedy.roots()}
    for _, j, i in candidate_swaps(ps, greedy):
        if len(entries) >= k:
            break
        tree = greedy.replace(j, i)
        key = tree.roots()
        if key not in seen:
            seen.add(key)
            entries.append((tree, base_score(ps, tree)))
    n_distinct = len(entries)
    while len(entries) < k:
        entries.append(entries[-1])
    return KBestList(entries, n_distinct)


def inject(kb: KBestList, tree: AntecedentTree, score: float) -> KBestList:
    """Make sure ``tree``'s partition is in the list (replacing the last distinct entry)."""
    key = tree.roots()
    distinct = kb.entries[:kb.n_distinct]
    if any(t.roots() == key for t, _ in distinct):
        return kb
    if kb.n_distinct < len(kb):
        distinct.append((tree, score))
    else:
        distinct[-1] = (tree, score)
    entries = list(distinct)
    while len(entries) < len(kb):
        entries.append(entries[-1])
    return KBestList(entries, len(distinct))


# encoding and rescoring ----------------------------------------------------------------


def tree_annotations(tree: AntecedentTree, mentions: Sequence[tuple[int, int]], n_tokens: int,
                     l_max: int = L_MAX) -> list[EntityAnnotation]:
    """Per-token annotations for a candidate; singleton chains are left unannotated."""
    roots = tree.roots()
    sizes = np.bincount(roots, minlength=len(roots)) if roots else np.zeros(0, int)
    spans = [(s, e, roots[j]) for j, (s, e) in enumerate(mentions) if sizes[roots[j]] > 1]
    return spans_to_annotations(n_tokens, spans, l_max)


@dataclass
class RerankEntry:
    position: int  # index in the k-best list
    log_p: float | None  # None when the candidate could not be encoded
    base: float
    score: float | None


@dataclass
class RerankResult:
    order: list[RerankEntry]
    errors: list[str] = field(default_factory=list)

    @property
    def best(self) -> int:
        return self.order[0].position


def rerank(model: EntityNLM, words: Sequence[int], ps: PairScores, kb: KBestList, mode: str = "lm",
           alpha: float = 1.0, beta: float = 0.0) -> RerankResult:
    """Sort candidates by log P(X, R, E, L) ("lm") or alpha * log P + beta * base ("combined").
    Ties keep list order; candidates that fail to encode sort last."""
    if mode not in ("lm", "combined"):
        raise ConfigurationError(f"rerank mode must be 'lm' or 'combined', got {mode!r}")
    if len(words) < ps.n_tokens:
        raise ContractError(f"{ps.doc_id}: {len(words)} words but pair scores cover {ps.n_tokens} tokens")
    cache: dict = {}
    entries, errors = [], []
    for pos, (tree, base) in enumerate(kb.entries):
        key = tree.roots()
        if key not in cache:
            try:
                ann = tree_annotations(tree, ps.mentions, len(words), model.config.l_max)
                lp, _ = model.doc_log_prob(Document(list(words), ann), noise_rng=np.random.default_rng(0))
                cache[key] = lp.item()
            except ContractError as exc:
                cache[key] = None
                errors.append(f"{ps.doc_id} candidate {pos}: {exc}")
        lp = cache[key]
        if lp is None:
            score = None
        elif mode == "lm":
            score = lp
        else:
            score = alpha * lp + beta * base
        entries.append(RerankEntry(pos, lp, base, score))
    order = sorted(entries, key=lambda e: (e.score is None, -(e.score or 0.0), e.position))
    return RerankResult(order, errors)


def grid_search(results: Sequence[tuple[Sequence[RerankEntry], Sequence[AntecedentTree], CorefPartition]],
                alphas: Iterable[float] = (0.0, 0.25, 0.5, 1.0, 2.0), betas: Iterable[float] = (0.0, 0.5, 1.0, 2.0)
                ) -> tuple[float, float, float]:
    """Pick (alpha, beta) maximizing corpus CoNLL-2 over already-scored dev lists.

    ``results`` holds, per document, the rerank entries (any order), the k-best trees
    and the gold partition.  Ties prefer earlier grid points."""
    best = (-1.0, 0.0, 1.0)
    for a in alphas:
        for b in betas:
            if a == 0 and b == 0:
                continue
            pairs = []
            for entries, trees, gold in results:
                top = min((e for e in entries if e.log_p is not None),
                          key=lambda e: (-(a * e.log_p + b * e.base), e.position), default=None)
                choice = trees[top.position] if top is not None else trees[0]
                pairs.append((gold, choice.partition()))
            score = corpus_coref_scores(pairs)["conll2"]
            if score > best[0]:
                best = (score, a, b)
    return best[1], best[2], best[0]


# gold trees and simulated scores -------------------------------------------------------------


def gold_tree(chain_ids: Sequence) -> AntecedentTree:
    """Closest-antecedent tree for mentions labelled with chain ids."""
    last: dict = {}
    ants = []
    for j, c in enumerate(chain_ids):
        ants.append(last.get(c))
        last[c] = j
    return AntecedentTree(tuple(ants))


def simulate_pair_scores(doc_id: str, n_tokens: int, mentions: Sequence[tuple[int, int]], chain_ids: Sequence,
                         rng: np.random.Generator, signal: float = 1.0, noise: float = 1.0) -> PairScores:
    """A noisy stand-in for an external coreference system: coreferent pairs score
    +signal (closest antecedent +2*signal), others -signal, eps +signal for chain
    starts, all plus Gaussian noise."""
    ant, empty = [], np.empty(len(mentions))
    gold = gold_tree(chain_ids)
    for j in range(len(mentions)):
        row = np.where(np.array([chain_ids[i] == chain_ids[j] for i in range(j)], dtype=bool), signal, -signal)
        if gold.antecedents[j] is not None:
            row[gold.antecedents[j]] = 2 * signal
        ant.append(row + noise * rng.standard_normal(j))
        empty[j] = (signal if gold.antecedents[j] is None else -signal) + noise * rng.standard_normal()
    return PairScores(doc_id, n_tokens, list(mentions), ant, empty)


# file I/O ------------------------------------------------------------------------------------


def write_pair_scores(docs: Sequence[PairScores], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ps in docs:
            spans = ",".join(f"{s}:{e}" for s, e in ps.mentions)
            fh.write(f"doc\t{ps.doc_id}\t{ps.n_tokens}\t{spans}\n")
            for j in range(len(ps)):
                for i in range(j):
                    fh.write(f"pair\t{ps.doc_id}\t{j}\t{i}\t{float(ps.antecedent[j][i])!r}\n")
                fh.write(f"pair\t{ps.doc_id}\t{j}\teps\t{float(ps.empty[j])!r}\n")


def read_pair_scores(path) -> list[PairScores]:
    docs: list[PairScores] = []
    current = None

    def finish():
        if current is None:
            return
        doc_id, n_tokens, mentions, ant, empty = current
        n = len(mentions)
        for j in range(n):
            if np.isnan(empty[j]) or np.any(np.isnan(ant[j])):
                raise IngestionError(f"{path}: document {doc_id}: missing scores for mention {j}")
        docs.append(PairScores(doc_id, n_tokens, mentions, ant, empty))

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if not line.strip():
                continue
            try:
                if parts[0] == "doc":
                    finish()
                    spans = [tuple(int(x) for x in s.split(":")) for s in parts[3].split(",") if s]
                    n = len(spans)
                    current = (parts[1], int(parts[2]), spans, [np.full(j, np.nan) for j in range(n)],
                               np.full(n, np.nan))
                elif parts[0] == "pair":
                    if current is None or parts[1] != current[0]:
                        raise IngestionError("pair line outside its document block")
                    j, score = int(parts[2]), float(parts[4])
                    if parts[3] == "eps":
                        current[4][j] = score
                    else:
                        current[3][j][int(parts[3])] = score
                else:
                    raise IngestionError(f"unknown record type {parts[0]!r}")
            except (IndexError, ValueError) as exc:
                raise IngestionError(f"{path}:{lineno}: malformed line ({exc})") from None
            except IngestionError as exc:
                raise IngestionError(f"{path}:{lineno}: {exc}") from None
    finish()
    return docs
