"""EntityNLM: an LSTM language model with explicit entity-mention variables.

At every token the model (optionally) decides whether a mention starts, which
entity it refers to and how long it is, then predicts the word from the LSTM
state plus the embedding of the most recently mentioned entity.  Entity
embeddings live in the document's :class:`EntityRegistry` and are updated at
each mention token by a gated convex combination with the LSTM state.

All distributions are computed with :mod:`entitynlm.tensor` ops, so running any
of them inside a ``Tape`` makes them differentiable.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .entity_state import (
    L_MAX,
    FEATURE_WIDTH,
    OUTSIDE,
    EntityAnnotation,
    EntityRegistry,
    StateMachine,
    distance_features,
)
from .errors import ConfigurationError, ContractError, LifecycleError, VocabularyError
from .nn import CfsmLayer, GlorotInit, LstmCell, cfsm_log_prob, default_class_count, lstm_step
from .tensor import Tensor


PROPOSALS = ("lookahead", "current")


@dataclass
class ModelConfig:
    vocab_size: int
    d_x: int = 32
    d_h: int = 32
    d_e: int | None = None
    l_max: int = L_MAX
    n_classes: int | None = None
    sigma: float = 0.01
    dropout: float = 0.0
    entity_blind: bool = False
    eod_id: int | None = None
    proposal: str = "lookahead"  # or "current": see EntityNLM.proposal_log_prob_and_sample

    def __post_init__(self):
        if self.proposal not in PROPOSALS:
            raise ConfigurationError(f"proposal must be one of {PROPOSALS}, got {self.proposal!r}")
        if self.d_e is None:
            self.d_e = self.d_h
        if self.d_e != self.d_h:
            # the entity update mixes h_t directly into the embedding
            raise ConfigurationError(f"d_e ({self.d_e}) must equal d_h ({self.d_h})")
        if self.n_classes is None:
            self.n_classes = default_class_count(self.vocab_size)
        if not 1 <= self.l_max <= L_MAX:
            raise ConfigurationError(f"l_max must be in [1, {L_MAX}], got {self.l_max}")
        if self.sigma < 0:
            raise ConfigurationError(f"sigma must be >= 0, got {self.sigma}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class StepDecision:
    annotation: EntityAnnotation
    word: int
    log_r: float | None = None
    log_e: float | None = None
    log_l: float | None = None
    log_x: float | None = None

    @property
    def total(self) -> float:
        s = 0.0
        for v in (self.log_r, self.log_e, self.log_l, self.log_x):
            if v is not None:
                s += v
        return s


@dataclass
class DocState:
    """Everything the generative story carries from one token to the next."""

    h: Tensor
    c: Tensor
    sm: StateMachine
    e_current: Tensor

    def copy(self) -> "DocState":
        return DocState(self.h, self.c, self.sm.copy(), self.e_current)


@dataclass
class Document:
    """Word ids plus aligned annotations (``annotations`` may be empty)."""

    words: list[int]
    annotations: list[EntityAnnotation] = field(default_factory=list)


class ProposalHeads:
    """The r/e/l scoring weights read by the proposal Q.

    Same shapes as the generative heads and initialized as copies of them, so an
    untrained model's proposal is exactly "the generative heads applied to h_t".
    Training then fits them to gold annotations with everything else held fixed.
    """

    NAMES = ("r_embed", "W_r", "W_entity", "w_dist", "W_length")

    def __init__(self, tensors: dict[str, Tensor]):
        for k in self.NAMES:
            setattr(self, k, tensors[k])

    @classmethod
    def copy_of(cls, source) -> "ProposalHeads":
        return cls({k: T.parameter(getattr(source, k).data, f"q.{k}") for k in cls.NAMES})

    def parameters(self) -> dict[str, Tensor]:
        return {f"q.{k}": getattr(self, k) for k in self.NAMES}


class EntityNLM:
    """Parameters plus the distributions over r, e, l and x."""

    GROUPS = ("embed", "lstm.W_x", "lstm.W_h", "lstm.b", "h0", "c0", "r_embed", "W_r", "W_entity", "w_dist",
              "W_length", "W_e", "W_delta", "cfsm.W_class", "cfsm.b_class", "cfsm.W_word", "cfsm.b_word")

    def __init__(self, config: ModelConfig, class_of, seed: int | None = 0):
        self.config = config
        c = config
        class_of = np.asarray(class_of, dtype=np.int64)
        if class_of.size != c.vocab_size:
            raise ConfigurationError(f"class assignment covers {class_of.size} words, vocab has {c.vocab_size}")
        if int(class_of.max()) + 1 != c.n_classes:
            raise ConfigurationError(f"class assignment uses {int(class_of.max()) + 1} classes, config says {c.n_classes}")
        init = GlorotInit(seed) if seed is not None else None
        mat = (lambda m, n: init.matrix(m, n)) if init else (lambda m, n: np.zeros((m, n)))
        vec = (lambda n: init.vector(n)) if init else (lambda n: np.zeros(n))
        d_h, d_e = c.d_h, c.d_e
        self.embed = T.parameter(mat(c.vocab_size, c.d_x), "embed")
        self.lstm = LstmCell.create(c.d_x, d_h, init)
        self.h0 = T.parameter(np.zeros(d_h), "h0")
        self.c0 = T.parameter(np.zeros(d_h), "c0")
        self.r_embed = T.parameter(np.stack([vec(d_e), vec(d_e)]), "r_embed")
        self.W_r = T.parameter(mat(d_h, d_e), "W_r")
        self.W_entity = T.parameter(mat(d_h, d_e), "W_entity")
        self.w_dist = T.parameter(vec(FEATURE_WIDTH) if init else np.zeros(FEATURE_WIDTH), "w_dist")
        self.W_length = T.parameter(mat(c.l_max, d_h + d_e), "W_length")
        self.W_e = T.parameter(mat(d_h, d_e), "W_e")
        self.W_delta = T.parameter(mat(d_h, d_e), "W_delta")
        self.cfsm = CfsmLayer.create(d_h, class_of, init)
        if seed is None:
            # an all-zero r_1 cannot be normalized into an entity embedding
            self.r_embed.data[:] = 1.0 / np.sqrt(d_e)
        if c.entity_blind:
            self.W_e.data[:] = 0.0
            self.W_r.data[:] = 0.0
        self.proposal = ProposalHeads.copy_of(self)
        self.check_shapes()

    # parameter bookkeeping ---------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out = {"embed": self.embed, **self.lstm.parameters(), "h0": self.h0, "c0": self.c0,
               "r_embed": self.r_embed, "W_r": self.W_r, "W_entity": self.W_entity, "w_dist": self.w_dist,
               "W_length": self.W_length, "W_e": self.W_e, "W_delta": self.W_delta, **self.cfsm.parameters()}
        return {k: out[k] for k in self.GROUPS}

    def reset_proposal(self) -> None:
        """Re-copy the proposal heads from the current generative heads."""
        self.proposal = ProposalHeads.copy_of(self)

    def all_parameters(self) -> dict[str, Tensor]:
        """Generative parameters followed by the proposal heads (what checkpoints store)."""
        return {**self.parameters(), **self.proposal.parameters()}

    def trainable(self) -> dict[str, Tensor]:
        params = self.parameters()
        if self.config.entity_blind:
            for k in ("r_embed", "W_r", "W_entity", "w_dist", "W_length", "W_e", "W_delta"):
                params.pop(k)
        return params

    def zero_grad(self) -> None:
        for p in self.all_parameters().values():
            p.grad = None

    def check_shapes(self) -> None:
        c = self.config
        expected = {
            "embed": (c.vocab_size, c.d_x), "lstm.W_x": (c.d_x, 4 * c.d_h), "lstm.W_h": (c.d_h, 4 * c.d_h),
            "lstm.b": (4 * c.d_h,), "h0": (c.d_h,), "c0": (c.d_h,), "r_embed": (2, c.d_e),
            "W_r": (c.d_h, c.d_e), "W_entity": (c.d_h, c.d_e), "w_dist": (FEATURE_WIDTH,),
            "W_length": (c.l_max, c.d_h + c.d_e), "W_e": (c.d_h, c.d_e), "W_delta": (c.d_h, c.d_e),
            "cfsm.W_class": (c.d_h, c.n_classes), "cfsm.b_class": (c.n_classes,),
            "cfsm.W_word": (c.vocab_size, c.d_h), "cfsm.b_word": (c.vocab_size,),
        }
        for k in ProposalHeads.NAMES:
            expected[f"q.{k}"] = expected[k]
        for k, p in self.all_parameters().items():
            if p.shape != expected[k]:
                raise ConfigurationError(f"parameter {k} has shape {p.shape}, expected {expected[k]}")

    def copy(self, **config_changes) -> "EntityNLM":
        new = EntityNLM.__new__(EntityNLM)
        new.config = replace(self.config, **config_changes)
        new.embed = T.parameter(self.embed.data, "embed")
        new.lstm = LstmCell(self.lstm.d_x, self.lstm.d_h, T.parameter(self.lstm.W_x.data, "lstm.W_x"),
                            T.parameter(self.lstm.W_h.data, "lstm.W_h"), T.parameter(self.lstm.b.data, "lstm.b"))
        for k in ("h0", "c0", "r_embed", "W_r", "W_entity", "w_dist", "W_length", "W_e", "W_delta"):
            setattr(new, k, T.parameter(getattr(self, k).data, k))
        cf = self.cfsm
        new.cfsm = CfsmLayer(cf.d_h, cf.class_of, T.parameter(cf.W_class.data, "cfsm.W_class"),
                             T.parameter(cf.b_class.data, "cfsm.b_class"), T.parameter(cf.W_word.data, "cfsm.W_word"),
                             T.parameter(cf.b_word.data, "cfsm.b_word"))
        new.proposal = ProposalHeads.copy_of(self.proposal)
        return new

    @property
    def r1(self) -> Tensor:
        return T.take(self.r_embed, 1)

    # distributions -----------------------------------------------------------

    # ``heads`` swaps in the proposal's weights; by default the generative ones are used

    def dist_r(self, h_prev: Tensor, heads=None) -> Tensor:
        """log p(R = 0), log p(R = 1) from the bilinear scores h^T W_r r."""
        hd = heads or self
        return T.log_softmax(T.matmul(hd.r_embed, T.matmul(h_prev, hd.W_r)))

    def dist_e(self, h_prev: Tensor, registry: EntityRegistry, t: int, heads=None) -> Tensor:
        """Log-distribution over entities 1..K+1 (position k holds entity k+1)."""
        hd = heads or self
        cands = registry.admissible()
        try:
            embs = [registry.embeddings[e] for e in cands]
        except KeyError as exc:
            raise LifecycleError(f"entity {exc.args[0]} has no embedding; create the candidate first") from None
        feats = np.stack([distance_features(registry, e, t) for e in cands])
        scores = T.matmul(T.stack(embs), T.matmul(h_prev, hd.W_entity))
        scores = scores + T.matmul(Tensor(feats), hd.w_dist)
        return T.log_softmax(scores)

    def dist_l(self, h_prev: Tensor, e_embed: Tensor, heads=None) -> Tensor:
        """Log-distribution over remaining lengths 1..l_max (position k is length k+1)."""
        hd = heads or self
        return T.log_softmax(T.matmul(hd.W_length, T.concat([h_prev, e_embed])))

    def word_rep(self, h_prev: Tensor, e_current: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        h = T.dropout(h_prev, self.config.dropout, rng)
        if self.config.entity_blind:
            return h
        return h + T.matmul(self.W_e, e_current)

    def dist_x(self, h_prev: Tensor, e_current: Tensor, word: int, rng: np.random.Generator | None = None) -> Tensor:
        return cfsm_log_prob(self.cfsm, self.word_rep(h_prev, e_current, rng), word)

    def word_log_probs(self, h_prev: Tensor, e_current: Tensor) -> np.ndarray:
        return self.cfsm.log_probs(self.word_rep(h_prev, e_current).data)

    # entity lifecycle ----------------------------------------------------------

    def generic_entity(self) -> Tensor:
        """e_current before any mention: the normalized r_1 embedding."""
        return T.l2_normalize(self.r1)

    def create_entity(self, registry: EntityRegistry, rng: np.random.Generator | None) -> Tensor:
        """Sample the pending new-entity embedding, normalize(r_1 + sigma z)."""
        idx = registry.new_index
        if idx in registry.embeddings:
            raise LifecycleError(f"entity {idx} already has an embedding")
        sigma = self.config.sigma
        if sigma > 0.0:
            if rng is None:
                raise ContractError("create_entity with sigma > 0 needs an rng")
            u = self.r1 + Tensor(sigma * rng.standard_normal(self.config.d_e))
        else:
            u = self.r1
        emb = T.l2_normalize(u)
        registry.embeddings[idx] = emb
        return emb

    def ensure_candidate(self, registry: EntityRegistry, rng: np.random.Generator | None) -> None:
        if registry.new_index not in registry.embeddings:
            self.create_entity(registry, rng)

    def update_entity(self, registry: EntityRegistry, e: int, h_t: Tensor) -> Tensor:
        """normalize(delta * e_old + (1 - delta) * h_t) with delta = sigmoid(h_t^T W_delta e_old)."""
        if e not in registry.embeddings:
            raise LifecycleError(f"entity {e} is not in the registry")
        old = registry.embeddings[e]
        delta = T.sigmoid(T.bilinear(h_t, self.W_delta, old))
        new = T.l2_normalize(delta * old + (1.0 - delta) * h_t)
        registry.embeddings[e] = new
        return new

    # per-token machinery -------------------------------------------------------

    def initial_state(self) -> DocState:
        return DocState(self.h0, self.c0, StateMachine(self.config.l_max), self.generic_entity())

    def select_entity(self, state: DocState, e: int) -> None:
        state.e_current = state.sm.registry.embeddings[e]

    def advance(self, state: DocState, annotation: EntityAnnotation, word: int,
                dropout_rng: np.random.Generator | None = None) -> None:
        """Commit (annotation, word): state machine step, LSTM step, entity update."""
        if not 0 <= word < self.config.vocab_size:
            raise VocabularyError(f"word id {word} not in vocabulary of size {self.config.vocab_size}")
        state.sm.step(annotation)
        x = T.dropout(T.embedding(self.embed, word), self.config.dropout, dropout_rng)
        state.h, state.c = lstm_step(self.lstm, state.h, state.c, x)
        if annotation.r == 1 and not self.config.entity_blind:
            state.e_current = self.update_entity(state.sm.registry, annotation.e, state.h)

    def hidden_states(self, words: Sequence[int]) -> list[Tensor]:
        """[h_{-1}=h0, h_0, ..., h_{n-1}] from the words alone (no dropout)."""
        hs = [self.h0]
        h, c = self.h0, self.c0
        for w in words:
            h, c = lstm_step(self.lstm, h, c, T.embedding(self.embed, w))
            hs.append(h)
        return hs

    # scoring -------------------------------------------------------------------

    def doc_log_prob(self, doc: Document, noise_rng: np.random.Generator | None = None,
                     dropout_rng: np.random.Generator | None = None) -> tuple[Tensor, list[StepDecision]]:
        """Joint log P(R, E, L, X) of a fully annotated document (teacher forcing).

        Returns the total as a tensor (differentiable under a tape) and the per-step
        breakdown.  ``noise_rng`` supplies the new-entity noise when sigma > 0
        (a fixed-seed generator is used when omitted).
        """
        if noise_rng is None:
            noise_rng = np.random.default_rng(0)
        words = doc.words
        if self.config.entity_blind:
            annotations = [OUTSIDE] * len(words)
        else:
            annotations = doc.annotations
            if len(annotations) != len(words):
                raise ContractError(f"{len(words)} words but {len(annotations)} annotations")
        state = self.initial_state()
        terms: list[Tensor] = []
        steps: list[StepDecision] = []
        for t, (a, w) in enumerate(zip(annotations, words)):
            a = EntityAnnotation(*a)
            try:
                state.sm.validate(a)
            except ContractError as exc:
                raise ContractError(f"doc_log_prob: {exc}") from None
            step = StepDecision(a, w)
            if state.sm.at_choice_point and not self.config.entity_blind:
                lr = T.take(self.dist_r(state.h), a.r)
                terms.append(lr)
                step.log_r = lr.item()
                if a.r == 1:
                    reg = state.sm.registry
                    self.ensure_candidate(reg, noise_rng)
                    le = T.take(self.dist_e(state.h, reg, t), a.e - 1)
                    self.select_entity(state, a.e)
                    ll = T.take(self.dist_l(state.h, state.e_current), a.l - 1)
                    terms += [le, ll]
                    step.log_e, step.log_l = le.item(), ll.item()
            lx = self.dist_x(state.h, state.e_current, w, dropout_rng)
            terms.append(lx)
            step.log_x = lx.item()
            steps.append(step)
            self.advance(state, a, w, dropout_rng)
        if not terms:
            return Tensor(0.0), steps
        return T.add_n(terms), steps

    def word_log_probs_blind(self, words: Sequence[int]) -> list[float]:
        """Per-word log-probabilities ignoring all entity machinery."""
        hs = self.hidden_states(words)
        return [cfsm_log_prob(self.cfsm, hs[t], w).item() for t, w in enumerate(words)]

    # sampling --------------------------------------------------------------------

    def sample_document(self, max_len: int, rng: np.random.Generator) -> Document:
        """Ancestral sample.  Stops after ``max_len`` tokens or on the end token; a
        mention still open at that point is simply cut off."""
        if max_len < 1:
            raise ContractError(f"max_len must be >= 1, got {max_len}")
        state = self.initial_state()
        doc = Document([], [])
        for t in range(max_len):
            sm = state.sm
            if not sm.at_choice_point:
                a = sm.forced()
            else:
                r = _draw(self.dist_r(state.h).data, rng) if not self.config.entity_blind else 0
                if r == 0:
                    a = OUTSIDE
                else:
                    self.ensure_candidate(sm.registry, rng)
                    e = _draw(self.dist_e(state.h, sm.registry, t).data, rng) + 1
                    self.select_entity(state, e)
                    l = _draw(self.dist_l(state.h, state.e_current).data, rng) + 1  # noqa: E741
                    a = EntityAnnotation(1, e, l)
            w, _ = self.cfsm.sample(self.word_rep(state.h, state.e_current).data, rng)
            doc.words.append(w)
            doc.annotations.append(a)
            self.advance(state, a, w)
            if w == self.config.eod_id:
                break
        return doc

    def proposal_log_prob_and_sample(self, words: Sequence[int], rng: np.random.Generator,
                                     noise_rng: np.random.Generator | None = None, joint: bool = False,
                                     hidden: list[Tensor] | None = None,
                                     r_cache: dict | None = None) -> "ProposalSample":
        """Sample (R, E, L) from the discriminative proposal Q given the words.

        Q reads h_t (the state *after* consuming x_t) wherever the generative model
        reads h_{t-1}, and never scores words.  With ``config.proposal == "current"``
        that is the whole story: R, E, L are drawn in generative order from h_t.  The
        default ``"lookahead"`` draws R from h_t, then L from the states at each
        candidate mention end, then E from the state at the chosen end, so the
        entity is picked after the words that identify it.  Both use the proposal
        heads and have full support, so either gives a valid importance weight.

        With ``joint=True`` the generative
        log P of the same trajectory is accumulated in the same pass, sharing the
        new-entity embeddings (so P/Q is a proper importance weight).

        ``hidden`` (from :meth:`hidden_states`) and ``r_cache`` (any dict, reused
        across calls on the same words) avoid recomputing word-only quantities.
        """
        if self.config.entity_blind:
            raise ContractError("the entity-blind model has no latent variables to propose")
        noise_rng = rng if noise_rng is None else noise_rng
        hs = hidden if hidden is not None else self.hidden_states(words)
        if r_cache is None:
            r_cache = {}
        q = self.proposal
        lookahead = self.config.proposal == "lookahead"
        sm = StateMachine(self.config.l_max)
        reg = sm.registry
        e_current = self.generic_entity()
        log_q = 0.0
        log_p = 0.0
        annotations = []
        for t, w in enumerate(words):
            h_prev, h_t = hs[t], hs[t + 1]
            if not sm.at_choice_point:
                a = sm.forced()
            else:
                if t not in r_cache:
                    r_cache[t] = (self.dist_r(h_t, q).data, self.dist_r(h_prev).data)
                qr, pr = r_cache[t]
                r = _draw(qr, rng)
                log_q += qr[r]
                if joint:
                    log_p += pr[r]
                if r == 0:
                    a = OUTSIDE
                else:
                    self.ensure_candidate(reg, noise_rng)
                    if lookahead:
                        ql = self.proposal_length(hs, t).data
                        l = _draw(ql, rng) + 1  # noqa: E741
                        qe = self.dist_e(hs[min(t + l, len(words))], reg, t, q).data
                        e = _draw(qe, rng) + 1
                        e_current = reg.embeddings[e]
                    else:
                        qe = self.dist_e(h_t, reg, t, q).data
                        e = _draw(qe, rng) + 1
                        e_current = reg.embeddings[e]
                        ql = self.dist_l(h_t, e_current, q).data
                        l = _draw(ql, rng) + 1  # noqa: E741
                    log_q += qe[e - 1] + ql[l - 1]
                    if joint:
                        log_p += self.dist_e(h_prev, reg, t).data[e - 1]
                        log_p += self.dist_l(h_prev, e_current).data[l - 1]
                    a = EntityAnnotation(1, e, l)
            if joint:
                log_p += self.dist_x(h_prev, e_current, w).item()
            sm.step(a)
            if a.r == 1:
                e_current = self.update_entity(reg, a.e, h_t)
            annotations.append(a)
        return ProposalSample(annotations, float(log_q), float(log_p) if joint else None)

    def proposal_length(self, hs: list[Tensor], t: int) -> Tensor:
        """Lookahead length proposal: length l is scored by the proposal's W_length row l
        against [h at the would-be mention end; h_t] (ends clamp to the last token)."""
        n = len(hs) - 1
        rows = [T.concat([hs[min(t + l, n)], hs[t + 1]]) for l in range(1, self.config.l_max + 1)]
        scores = T.matmul(T.mul(self.proposal.W_length, T.stack(rows)), T.constant(np.ones(2 * self.config.d_h)))
        return T.log_softmax(scores)

    def proposal_log_prob(self, doc: Document, noise_rng: np.random.Generator | None = None) -> Tensor:
        """log Q(R, E, L | X) of the document's annotations.

        Hidden states and entity embeddings are computed without recording, so
        under a tape only the proposal heads receive gradients.
        """
        if noise_rng is None:
            noise_rng = np.random.default_rng(0)
        q = self.proposal
        with T.no_grad():
            hs = self.hidden_states(doc.words)
        sm = StateMachine(self.config.l_max)
        reg = sm.registry
        terms: list[Tensor] = []
        for t, a in enumerate(doc.annotations):
            a = EntityAnnotation(*a)
            h_t = hs[t + 1]
            if sm.at_choice_point:
                terms.append(T.take(self.dist_r(h_t, q), a.r))
                if a.r == 1:
                    with T.no_grad():
                        self.ensure_candidate(reg, noise_rng)
                    if self.config.proposal == "lookahead":
                        terms.append(T.take(self.proposal_length(hs, t), a.l - 1))
                        h_end = hs[min(t + a.l, len(doc.words))]
                        terms.append(T.take(self.dist_e(h_end, reg, t, q), a.e - 1))
                    else:
                        terms.append(T.take(self.dist_e(h_t, reg, t, q), a.e - 1))
                        terms.append(T.take(self.dist_l(h_t, reg.embeddings[a.e], q), a.l - 1))
            sm.step(a)
            if a.r == 1:
                with T.no_grad():
                    self.update_entity(reg, a.e, h_t)
        return T.add_n(terms) if terms else Tensor(0.0)


@dataclass
class ProposalSample:
    annotations: list[EntityAnnotation]
    log_q: float
    log_p: float | None = None


def _draw(logp: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(np.exp(logp - logp.max()))
    return min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), cdf.size - 1)


# module-level operation names --------------------------------------------------


def dist_r(model: EntityNLM, h_prev: Tensor) -> Tensor:
    return model.dist_r(h_prev)


def dist_e(model: EntityNLM, h_prev: Tensor, registry: EntityRegistry, t: int) -> Tensor:
    return model.dist_e(h_prev, registry, t)


def dist_l(model: EntityNLM, h_prev: Tensor, e_embed: Tensor) -> Tensor:
    return model.dist_l(h_prev, e_embed)


def dist_x(model: EntityNLM, h_prev: Tensor, e_current: Tensor, word: int) -> Tensor:
    return model.dist_x(h_prev, e_current, word)


def doc_log_prob(model: EntityNLM, doc: Document, noise_rng=None) -> tuple[Tensor, list[StepDecision]]:
    return model.doc_log_prob(doc, noise_rng)


# checkpoints ---------------------------------------------------------------------

MAGIC = b"ENTITYNLM-CKPT\n"
CHECKPOINT_VERSION = 1


def vocab_hash(words: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(words).encode("utf-8")).hexdigest()


def save_checkpoint(model: EntityNLM, path, vocab_words: Sequence[str] | None = None, extra: dict | None = None) -> None:
    """Binary dump: magic line, 8-byte header length, JSON header, raw float64 data.

    The header records the config, class assignment, vocabulary (and its hash) and
    each tensor's name, shape and byte offset.  Output is byte-deterministic.
    """
    params = model.all_parameters()
    entries, offset = [], 0
    for name, p in params.items():
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += p.data.size * 8
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "class_of": model.cfsm.class_of.tolist(),
        "vocab": list(vocab_words) if vocab_words is not None else None,
        "vocab_hash": vocab_hash(vocab_words) if vocab_words is not None else None,
        "tensors": entries,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ConfigurationError(f"{path}: not an EntityNLM checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n).decode("utf-8"))


def load_checkpoint(path, vocab_words: Sequence[str] | None = None) -> tuple[EntityNLM, dict]:
    """Load a checkpoint; if ``vocab_words`` is given its hash must match."""
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise ConfigurationError(f"{path}: not an EntityNLM checkpoint")
    pos = len(MAGIC)
    (n,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    header = json.loads(raw[pos:pos + n].decode("utf-8"))
    pos += n
    if header.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {header.get('version')}")
    if vocab_words is not None and header.get("vocab_hash") != vocab_hash(vocab_words):
        raise ConfigurationError(f"{path}: vocabulary hash does not match the supplied vocabulary")
    model = EntityNLM(ModelConfig(**header["config"]), header["class_of"], seed=None)
    params = model.all_parameters()
    for entry in header["tensors"]:
        name = entry["name"]
        if name not in params:
            raise ConfigurationError(f"{path}: unknown tensor {name}")
        p = params[name]
        shape = tuple(entry["shape"])
        if shape != p.shape:
            raise ConfigurationError(f"{path}: tensor {name} has shape {shape}, model expects {p.shape}")
        start = pos + entry["offset"]
        p.data[...] = np.frombuffer(raw[start:start + p.data.size * 8], dtype="<f8").reshape(shape)
    return model, header
