"""Documents, preprocessing, vocabulary, encoding and a synthetic corpus.

Interchange format: one JSON object per line,
``{"id": str, "sentences": [[token, ...], ...], "mentions": [[entity, sentence, start, end], ...]}``
with ``end`` inclusive and token offsets relative to the sentence.
"""

from __future__ import annotations

import hashlib
import json
import pickle
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .entity_state import L_MAX, EntityAnnotation, annotations_to_spans, spans_to_annotations
from .errors import IngestionError, VocabularyError

UNK, NUM, EOD = "<unk>", "<num>", "<eod>"
RESERVED = (UNK, NUM, EOD)

_NUMBER = re.compile(r"^[+-]?(\d+([.,]\d+)*|\d*\.\d+)$")
_PUNCT_ONLY = re.compile(r"^[^\w\s]+$")


@dataclass(frozen=True)
class Mention:
    entity: str
    sentence: int
    start: int
    end: int  # inclusive


@dataclass
class RawDocument:
    id: str
    sentences: list[list[str]]
    mentions: list[Mention] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "sentences": self.sentences,
                           "mentions": [[m.entity, m.sentence, m.start, m.end] for m in self.mentions]})

    @classmethod
    def from_json(cls, line: str) -> "RawDocument":
        try:
            obj = json.loads(line)
            doc = cls(str(obj["id"]), [list(map(str, s)) for s in obj["sentences"]],
                      [Mention(str(e), int(s), int(a), int(b)) for e, s, a, b in obj.get("mentions", [])])
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestionError(f"malformed document record: {exc}") from None
        validate(doc)
        return doc

    @property
    def n_tokens(self) -> int:
        return sum(len(s) for s in self.sentences)


def validate(doc: RawDocument) -> None:
    for m in doc.mentions:
        if not 0 <= m.sentence < len(doc.sentences):
            raise IngestionError(f"document {doc.id}: mention {m} refers to a missing sentence")
        n = len(doc.sentences[m.sentence])
        if not 0 <= m.start <= m.end < n:
            raise IngestionError(f"document {doc.id}: span ({m.start}, {m.end}) outside sentence of {n} tokens")


def read_documents(path) -> list[RawDocument]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for k, line in enumerate(fh, 1):
            if line.strip():
                try:
                    docs.append(RawDocument.from_json(line))
                except IngestionError as exc:
                    raise IngestionError(f"{path}:{k}: {exc}") from None
    return docs


def write_documents(docs: Iterable[RawDocument], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(d.to_json() + "\n")


# preprocessing -----------------------------------------------------------------


def is_number(token: str) -> bool:
    return bool(_NUMBER.match(token))


def is_punct(token: str) -> bool:
    return bool(_PUNCT_ONLY.match(token))


def enclosing_mentions(mentions: Sequence[Mention]) -> list[Mention]:
    """Drop mentions embedded in another one.  Crossing (partially overlapping)
    spans keep the longer mention, the earlier one on ties."""
    order = sorted(mentions, key=lambda m: (m.sentence, -(m.end - m.start), m.start, m.entity))
    kept: list[Mention] = []
    for m in order:
        if any(k.sentence == m.sentence and not (m.end < k.start or m.start > k.end) for k in kept):
            continue
        kept.append(m)
    return sorted(kept, key=lambda m: (m.sentence, m.start))


def drop_singletons(mentions: Sequence[Mention]) -> list[Mention]:
    counts = Counter(m.entity for m in mentions)
    return [m for m in mentions if counts[m.entity] > 1]


def preprocess(raw: RawDocument, lowercase: bool = True, numbers: bool = True, strip_punct: bool = True,
               singletons: bool = False) -> RawDocument:
    """Lowercase, map numbers to ``<num>``, keep only enclosing mentions, drop
    singleton entities (unless ``singletons``), then delete punctuation-only tokens
    outside mentions and re-index spans.  Sentences left empty are dropped."""
    validate(raw)
    mentions = enclosing_mentions(raw.mentions)
    if not singletons:
        mentions = drop_singletons(mentions)
    by_sentence: dict[int, list[Mention]] = {}
    for m in mentions:
        by_sentence.setdefault(m.sentence, []).append(m)
    sentences, out_mentions = [], []
    for si, sent in enumerate(raw.sentences):
        inside = np.zeros(len(sent), dtype=bool)
        for m in by_sentence.get(si, []):
            inside[m.start:m.end + 1] = True
        new_index, tokens = [], []
        for k, tok in enumerate(sent):
            if lowercase:
                tok = tok.lower()
            if numbers and is_number(tok):
                tok = NUM
            if strip_punct and is_punct(tok) and not inside[k]:
                new_index.append(None)
                continue
            new_index.append(len(tokens))
            tokens.append(tok)
        if not tokens:
            continue
        for m in by_sentence.get(si, []):
            out_mentions.append(Mention(m.entity, len(sentences), new_index[m.start], new_index[m.end]))
        sentences.append(tokens)
    return RawDocument(raw.id, sentences, out_mentions)


# vocabulary ------------------------------------------------------------------------


@dataclass
class Vocabulary:
    words: list[str]
    counts: dict[str, int]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.words[:len(RESERVED)]) != RESERVED:
            raise VocabularyError(f"vocabulary must start with the reserved tokens {RESERVED}")
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        return self.index.get(word, self.index[UNK])

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def eod_id(self) -> int:
        return self.index[EOD]

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.words).encode("utf-8")).hexdigest()

    def class_counts(self) -> dict[int, int]:
        """Per-id counts for class assignment (reserved tokens count at least 1)."""
        return {i: max(1, self.counts.get(w, 0)) for i, w in enumerate(self.words)}

    def to_json(self) -> str:
        return json.dumps({"words": self.words, "counts": self.counts})

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        obj = json.loads(text)
        return cls(obj["words"], obj["counts"])


def build_vocab(docs: Sequence[RawDocument], min_count: int = 2) -> Vocabulary:
    counts: Counter = Counter()
    for d in docs:
        for s in d.sentences:
            counts.update(s)
    if not counts:
        raise IngestionError("cannot build a vocabulary from an empty corpus")
    kept = sorted((w for w, c in counts.items() if c >= min_count and w not in RESERVED),
                  key=lambda w: (-counts[w], w))
    unk = sum(c for w, c in counts.items() if c < min_count and w not in RESERVED)
    full = {w: counts[w] for w in kept}
    full[UNK] = unk + counts.get(UNK, 0)
    full[NUM] = counts.get(NUM, 0)
    full[EOD] = len(docs)
    return Vocabulary([*RESERVED, *kept], full)


# encoding ----------------------------------------------------------------------------


@dataclass
class EncodedDocument:
    id: str
    words: list[int]
    annotations: list[EntityAnnotation]
    sentence_ids: list[int]

    @property
    def mentions(self) -> list[tuple[int, int, int]]:
        return annotations_to_spans(self.annotations)


def flat_spans(doc: RawDocument) -> list[tuple[int, int, str]]:
    offsets = np.cumsum([0] + [len(s) for s in doc.sentences])
    return [(int(offsets[m.sentence]) + m.start, int(offsets[m.sentence]) + m.end, m.entity) for m in doc.mentions]


def encode(doc: RawDocument, vocab: Vocabulary, append_eod: bool = True, l_max: int = L_MAX) -> EncodedDocument:
    """Per-token ids and (r, e, l) annotations.  Overlapping spans raise ContractError."""
    words = [vocab.id(w) for s in doc.sentences for w in s]
    sentence_ids = [k for k, s in enumerate(doc.sentences) for _ in s]
    annotations = spans_to_annotations(len(words), flat_spans(doc), l_max)
    if append_eod:
        words.append(vocab.eod_id)
        annotations.append(EntityAnnotation(0, 0, 1))
        sentence_ids.append(len(doc.sentences))
    return EncodedDocument(doc.id, words, annotations, sentence_ids)


def encode_corpus(docs: Sequence[RawDocument], vocab: Vocabulary, **kw) -> list[EncodedDocument]:
    return [encode(d, vocab, **kw) for d in docs]


def corpus_hash(docs: Sequence[RawDocument]) -> str:
    h = hashlib.sha256()
    for d in docs:
        h.update(d.to_json().encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def cached_encode(docs: Sequence[RawDocument], vocab: Vocabulary, cache_dir, **kw) -> list[EncodedDocument]:
    """``encode_corpus`` with an on-disk cache keyed by (corpus hash, vocab hash)."""
    cache_dir = Path(cache_dir)
    path = cache_dir / f"encoded-{corpus_hash(docs)[:16]}-{vocab.hash[:16]}.pkl"
    if path.exists():
        with open(path, "rb") as fh:
            return pickle.load(fh)
    encoded = encode_corpus(docs, vocab, **kw)
    cache_dir.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        pickle.dump(encoded, fh, protocol=4)
    return encoded


# synthetic corpus ----------------------------------------------------------------------

NEW_CUES = ("suddenly", "meanwhile", "once")
OLD_CUES = ("then", "later", "again")
PRONOUNS = ("it",)


@dataclass
class SynthSpec:
    """Template narratives.  Every document introduces ``1 + Poisson(mean_entities - 1)``
    entities; ``recurrence`` is the fraction of mentions (after the first) that refer
    back to an existing entity; a re-mention picks the most recent entity with
    probability ``recency`` and otherwise a uniformly chosen older one.  The
    ``*_share`` fields split the open vocabulary into nouns, adjectives and verbs
    (the rest is filler); a small noun pool means each noun recurs across many
    documents."""

    num_docs: int = 100
    vocab_size: int = 300
    mean_entities: float = 4.0
    recurrence: float = 0.6
    recency: float = 0.5
    mentions_if_all_recurrent: int = 8
    adjective_rate: float = 0.5
    pronoun_rate: float = 0.0
    filler_rate: float = 0.2
    cues: bool = True
    determiners: bool = True  # False: mentions are bare "[adj] noun", like names
    recur_all: bool = False  # append a closing re-mention for every entity mentioned once
    noun_share: float = 0.55
    adj_share: float = 0.15
    verb_share: float = 0.15

    def __post_init__(self):
        if not 0.0 <= self.recurrence <= 1.0 or not 0.0 <= self.recency <= 1.0:
            raise IngestionError("recurrence and recency must be probabilities")
        shares = (self.noun_share, self.adj_share, self.verb_share)
        if min(shares) <= 0.0 or sum(shares) >= 1.0:
            raise IngestionError("lexicon shares must be positive and sum to less than 1")
        if self.mean_entities < 1 or self.vocab_size < 40:
            raise IngestionError("need mean_entities >= 1 and vocab_size >= 40")


def _pseudo_words(n: int, rng: np.random.Generator, taken: set) -> list[str]:
    onsets = "b c d f g h j k l m n p r s t v w z".split()
    vowels = "a e i o u".split()
    out = []
    while len(out) < n:
        k = int(rng.integers(2, 4))
        w = "".join(onsets[int(rng.integers(len(onsets)))] + vowels[int(rng.integers(len(vowels)))] for _ in range(k))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def synth_lexicon(vocab_size: int, seed: int = 0, shares: tuple[float, float, float] = (0.55, 0.15, 0.15)
                  ) -> dict[str, list[str]]:
    rng = np.random.default_rng(seed)
    taken = set(NEW_CUES + OLD_CUES + PRONOUNS + ("a", "the"))
    n_open = vocab_size - len(taken)
    sizes = {k: max(2, int(f * n_open)) for k, f in zip(("noun", "adj", "verb"), shares)}
    sizes["filler"] = n_open - sum(sizes.values())
    return {k: _pseudo_words(n, rng, taken) for k, n in sizes.items()}


def synth_corpus(spec: SynthSpec, seed: int) -> list[RawDocument]:
    """Deterministic under ``seed``; gold annotations are exact by construction."""
    lex = synth_lexicon(spec.vocab_size, shares=(spec.noun_share, spec.adj_share, spec.verb_share))
    rng = np.random.default_rng(seed)
    return [_synth_doc(spec, lex, rng, f"synth-{seed}-{k}") for k in range(spec.num_docs)]


def _synth_doc(spec: SynthSpec, lex: dict, rng: np.random.Generator, doc_id: str) -> RawDocument:
    if spec.recurrence >= 1.0:
        n_entities, n_slots = 1, spec.mentions_if_all_recurrent
    else:
        n_entities = min(1 + int(rng.poisson(spec.mean_entities - 1)), len(lex["noun"]))
        n_slots = max(n_entities, int(round(1 + (n_entities - 1) / (1.0 - spec.recurrence))))
    new_slots = {0} | set(rng.choice(np.arange(1, n_slots), size=n_entities - 1, replace=False).tolist()) \
        if n_slots > 1 else {0}
    nouns = rng.choice(len(lex["noun"]), size=n_entities, replace=False)
    entities = []
    for k in range(n_entities):
        adj = lex["adj"][int(rng.integers(len(lex["adj"])))] if rng.random() < spec.adjective_rate else None
        entities.append((f"e{k}", adj, lex["noun"][int(nouns[k])]))
    sentences: list[list[str]] = []
    mentions: list[Mention] = []
    history: list[int] = []  # entity indices in order of mention

    def filler(n):
        return [lex["filler"][int(rng.integers(len(lex["filler"])))] for _ in range(n)]

    def mention_sentence(ent: int, cue_set: tuple[str, ...]) -> None:
        history.append(ent)
        key, adj, noun = entities[ent]
        if cue_set is OLD_CUES and spec.pronoun_rate > 0 and rng.random() < spec.pronoun_rate:
            span = [PRONOUNS[0]]
        else:
            det = (["a"] if cue_set is NEW_CUES else ["the"]) if spec.determiners else []
            span = det + ([adj] if adj else []) + [noun]
        sent = [cue_set[int(rng.integers(len(cue_set)))]] if spec.cues else []
        start = len(sent)
        sent += span
        mentions.append(Mention(key, len(sentences), start, start + len(span) - 1))
        sent += [lex["verb"][int(rng.integers(len(lex["verb"])))]] + filler(int(rng.integers(1, 3))) + ["."]
        sentences.append(sent)

    for slot in range(n_slots):
        if spec.filler_rate > 0 and slot > 0 and rng.random() < spec.filler_rate:
            sentences.append(["the"] + filler(1) + [lex["verb"][int(rng.integers(len(lex["verb"])))]]
                             + filler(1) + ["."])
        if slot in new_slots:
            mention_sentence(len(set(history)), NEW_CUES)
        else:
            recent = history[-1]
            older = sorted(set(history) - {recent})
            ent = recent if (not older or rng.random() < spec.recency) else older[int(rng.integers(len(older)))]
            mention_sentence(ent, OLD_CUES)
    if spec.recur_all:
        for ent in [e for e in range(n_entities) if history.count(e) == 1]:
            mention_sentence(ent, OLD_CUES)
    return RawDocument(doc_id, sentences, mentions)
