"""Shared hand fixtures."""

from entitynlm.corpus import Mention, RawDocument

EXAMPLE_SENT1 = "John wanted to go to the coffee shop in downtown Copenhagen .".split()
EXAMPLE_SENT2 = "He was told that it sold the best beans .".split()
# (start, end inclusive, entity) in whole-document token offsets
EXAMPLE_MENTIONS = [(0, 0, "john"), (5, 7, "shop"), (9, 10, "cph"), (12, 12, "john"), (16, 16, "shop"),
                    (18, 20, "beans")]
# hand-derived rows; the final token is the sentence-final period, so R=0, L=1 there
EXAMPLE_R = [1, 0, 0, 0, 0, 1, 1, 1, 0, 1, 1, 0, 1, 0, 0, 0, 1, 0, 1, 1, 1, 0]
EXAMPLE_E = [1, 0, 0, 0, 0, 2, 2, 2, 0, 3, 3, 0, 1, 0, 0, 0, 2, 0, 4, 4, 4, 0]
EXAMPLE_L = [1, 1, 1, 1, 1, 3, 2, 1, 1, 2, 1, 1, 1, 1, 1, 1, 1, 1, 3, 2, 1, 1]


def running_example_document() -> RawDocument:
    n1 = len(EXAMPLE_SENT1)
    mentions = []
    for start, end, key in EXAMPLE_MENTIONS:
        s = 0 if start < n1 else 1
        off = 0 if s == 0 else n1
        mentions.append(Mention(key, s, start - off, end - off))
    return RawDocument("running-example", [list(EXAMPLE_SENT1), list(EXAMPLE_SENT2)], mentions)
