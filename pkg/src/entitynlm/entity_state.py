"""Symbolic side of the generative story: per-token (r, e, l) annotations,
the growing entity registry and the state machine that enforces which
annotation may follow which.  Nothing here touches neural scoring; the
registry only stores whatever embedding objects the model hands it.

Positions are 0-based token offsets.  Entity indices start at 1 and 0 is the
non-entity marker.
"""

from __future__ import annotations

from typing import Any, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import ContractError

NON_ENTITY = 0
L_MAX = 25
# distance buckets: [1], [2,3], [4,7], [8,15], [16,31], [32,63], [64, inf)
N_DISTANCE_BUCKETS = 7
# recency rank among existing entities by last mention: most recent, second, older
N_RECENCY_RANKS = 3
FEATURE_WIDTH = N_DISTANCE_BUCKETS + N_RECENCY_RANKS


class EntityAnnotation(NamedTuple):
    r: int
    e: int
    l: int  # noqa: E741 - remaining mention length


OUTSIDE = EntityAnnotation(0, NON_ENTITY, 1)


def check_annotation(a: EntityAnnotation, l_max: int = L_MAX) -> None:
    if a.r not in (0, 1):
        raise ContractError(f"r must be 0 or 1, got {a.r}")
    if not 1 <= a.l <= l_max:
        raise ContractError(f"mention length {a.l} outside [1, {l_max}]")
    if a.r == 0 and (a.l != 1 or a.e != NON_ENTITY):
        raise ContractError(f"r=0 requires l=1 and the non-entity marker, got {tuple(a)}")
    if a.r == 1 and a.e < 1:
        raise ContractError(f"r=1 requires an entity index >= 1, got {a.e}")


class EntityRegistry:
    """Entities created so far.

    ``max_index`` is the largest entity index used by any annotation; the
    admissible set at a choice point is ``1 .. max_index + 1``.  ``embeddings``
    may additionally hold a pending vector for index ``max_index + 1``.
    """

    __slots__ = ("embeddings", "last_mention", "current", "max_index")

    def __init__(self):
        self.embeddings: dict[int, Any] = {}
        self.last_mention: dict[int, int] = {}
        self.current: int | None = None
        self.max_index = 0

    def copy(self) -> "EntityRegistry":
        new = EntityRegistry.__new__(EntityRegistry)
        new.embeddings = dict(self.embeddings)
        new.last_mention = dict(self.last_mention)
        new.current = self.current
        new.max_index = self.max_index
        return new

    @property
    def new_index(self) -> int:
        return self.max_index + 1

    def admissible(self) -> range:
        return range(1, self.max_index + 2)

    def __len__(self) -> int:
        return self.max_index


def distance_bucket(d: int) -> int:
    if d < 1:
        raise ContractError(f"distance must be >= 1, got {d}")
    return min(d.bit_length() - 1, N_DISTANCE_BUCKETS - 1)


def distance_features(reg: EntityRegistry, e: int, t: int) -> np.ndarray:
    """Features of existing entity ``e`` at position ``t``: a one-hot distance bucket of
    ``t - last mention of e`` followed by a one-hot recency rank (how many other
    entities were mentioned more recently, capped).  Zeros for the new entity."""
    if e not in reg.admissible():
        raise ContractError(f"entity {e} not admissible (candidates 1..{reg.new_index})")
    f = np.zeros(FEATURE_WIDTH)
    if e == reg.new_index:
        return f
    last = reg.last_mention[e]
    f[distance_bucket(t - last)] = 1.0
    rank = sum(1 for k, p in reg.last_mention.items() if k != e and p > last)
    f[N_DISTANCE_BUCKETS + min(rank, N_RECENCY_RANKS - 1)] = 1.0
    return f


class StateMachine:
    """Tracks the previous annotation, position and registry for one document."""

    __slots__ = ("registry", "prev", "position", "l_max")

    def __init__(self, l_max: int = L_MAX, registry: EntityRegistry | None = None):
        self.registry = registry if registry is not None else EntityRegistry()
        self.prev = OUTSIDE
        self.position = 0
        self.l_max = l_max

    def copy(self) -> "StateMachine":
        new = StateMachine.__new__(StateMachine)
        new.registry = self.registry.copy()
        new.prev = self.prev
        new.position = self.position
        new.l_max = self.l_max
        return new

    @property
    def at_choice_point(self) -> bool:
        return self.prev.l == 1

    def forced(self) -> EntityAnnotation:
        """The only annotation allowed when continuing a mention."""
        if self.at_choice_point:
            raise ContractError("no forced continuation at a choice point")
        return EntityAnnotation(self.prev.r, self.prev.e, self.prev.l - 1)

    def admissible_entities(self) -> range:
        if not self.at_choice_point:
            raise ContractError(f"admissible_entities called mid-mention (prev.l={self.prev.l})")
        return self.registry.admissible()

    def validate(self, choice: EntityAnnotation) -> None:
        t = self.position
        try:
            check_annotation(choice, self.l_max)
        except ContractError as exc:
            raise ContractError(f"token {t}: {exc}") from None
        if not self.at_choice_point:
            if choice != self.forced():
                raise ContractError(
                    f"token {t}: forced continuation violated, expected {tuple(self.forced())}, got {tuple(choice)}"
                )
        elif choice.r == 1 and choice.e not in self.registry.admissible():
            raise ContractError(
                f"token {t}: entity {choice.e} inadmissible, candidates are 1..{self.registry.new_index}"
            )

    def step(self, choice: EntityAnnotation) -> None:
        """In-place advance (validated)."""
        self.validate(choice)
        reg = self.registry
        if choice.r == 1:
            if choice.e == reg.new_index:
                reg.max_index += 1
            reg.last_mention[choice.e] = self.position
            reg.current = choice.e
        self.prev = choice
        self.position += 1

    def advance(self, choice: EntityAnnotation) -> "StateMachine":
        new = self.copy()
        new.step(choice)
        return new


def admissible_entities(sm: StateMachine) -> range:
    return sm.admissible_entities()


def advance(sm: StateMachine, choice: EntityAnnotation) -> StateMachine:
    return sm.advance(choice)


def replay(annotations: Sequence[EntityAnnotation], l_max: int = L_MAX) -> StateMachine:
    sm = StateMachine(l_max)
    for a in annotations:
        sm.step(EntityAnnotation(*a))
    return sm


def next_choices(sm: StateMachine) -> list[EntityAnnotation]:
    """Every annotation allowed at the next token."""
    if not sm.at_choice_point:
        return [sm.forced()]
    out = [OUTSIDE]
    for e in sm.registry.admissible():
        for l in range(1, sm.l_max + 1):  # noqa: E741
            out.append(EntityAnnotation(1, e, l))
    return out


def enumerate_trajectories(n_tokens: int, l_max: int = L_MAX) -> Iterator[tuple[EntityAnnotation, ...]]:
    """All valid annotation sequences of length ``n_tokens``.  The last mention
    may be cut off by the end of the sequence (its remaining length exceeds the
    tokens left); these are exactly the prefixes the generative story can emit."""

    def rec(sm: StateMachine, prefix: list):
        if sm.position == n_tokens:
            yield tuple(prefix)
            return
        for a in next_choices(sm):
            nxt = sm.advance(a)
            prefix.append(a)
            yield from rec(nxt, prefix)
            prefix.pop()

    yield from rec(StateMachine(l_max), [])


# span conversion ------------------------------------------------------------


def spans_to_annotations(n_tokens: int, mentions: Sequence[tuple[int, int, Any]],
                         l_max: int = L_MAX) -> list[EntityAnnotation]:
    """Turn ``(start, end_inclusive, entity_key)`` spans into per-token annotations.

    Entities are renumbered 1, 2, ... by first appearance.  Mentions longer than
    ``l_max`` keep only their first ``l_max`` tokens.
    """
    out = [OUTSIDE] * n_tokens
    ids: dict[Any, int] = {}
    last_end = -1
    for start, end, key in sorted(mentions, key=lambda m: (m[0], m[1])):
        if not 0 <= start <= end < n_tokens:
            raise ContractError(f"span ({start}, {end}) outside document of {n_tokens} tokens")
        if start <= last_end:
            raise ContractError(f"span ({start}, {end}) overlaps a previous mention ending at {last_end}")
        last_end = end
        if key not in ids:
            ids[key] = len(ids) + 1
        e = ids[key]
        length = min(end - start + 1, l_max)
        for k in range(length):
            out[start + k] = EntityAnnotation(1, e, length - k)
    return out


def annotations_to_spans(annotations: Sequence[EntityAnnotation]) -> list[tuple[int, int, int]]:
    """Inverse of :func:`spans_to_annotations` (entity ids as integers)."""
    spans = []
    prev_l = 1
    n = len(annotations)
    for t, a in enumerate(annotations):
        if prev_l == 1 and a.r == 1:
            spans.append((t, min(t + a.l - 1, n - 1), a.e))
        prev_l = a.l
    return spans
