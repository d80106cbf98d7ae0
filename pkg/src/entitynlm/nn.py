"""LSTM cell, class-factorized softmax and initializers.

Both the LSTM step and the CFSM log-probability are single fused tape nodes
with hand-written backward passes; the finite-difference tests in
``tests/test_nn.py`` are what keeps them honest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, VocabularyError
from .tensor import Tensor


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)); vectors use (1, n)."""
    if len(shape) == 1:
        fan_in, fan_out = 1, shape[0]
    else:
        fan_in, fan_out = shape[0], shape[1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class GlorotInit:
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    def matrix(self, m: int, n: int) -> np.ndarray:
        return glorot_uniform(self.rng, (m, n))

    def vector(self, n: int) -> np.ndarray:
        return glorot_uniform(self.rng, (n,))


# LSTM -----------------------------------------------------------------------

GATES = ("input", "forget", "output", "candidate")


class LstmCell:
    """Single-layer LSTM.  The four gates are stored stacked along the output axis
    in the order input, forget, output, candidate."""

    def __init__(self, d_x: int, d_h: int, W_x: Tensor, W_h: Tensor, b: Tensor):
        if W_x.shape != (d_x, 4 * d_h) or W_h.shape != (d_h, 4 * d_h) or b.shape != (4 * d_h,):
            raise DimensionError(
                f"LstmCell: weights {W_x.shape}, {W_h.shape}, {b.shape} inconsistent with d_x={d_x}, d_h={d_h}"
            )
        self.d_x = d_x
        self.d_h = d_h
        self.W_x = W_x
        self.W_h = W_h
        self.b = b

    @classmethod
    def create(cls, d_x: int, d_h: int, init: GlorotInit | None = None) -> "LstmCell":
        if init is None:
            z = np.zeros
            return cls(d_x, d_h, T.parameter(z((d_x, 4 * d_h)), "lstm.W_x"),
                       T.parameter(z((d_h, 4 * d_h)), "lstm.W_h"), T.parameter(z(4 * d_h), "lstm.b"))
        W_x = np.concatenate([init.matrix(d_x, d_h) for _ in GATES], axis=1)
        W_h = np.concatenate([init.matrix(d_h, d_h) for _ in GATES], axis=1)
        return cls(d_x, d_h, T.parameter(W_x, "lstm.W_x"), T.parameter(W_h, "lstm.W_h"),
                   T.parameter(np.zeros(4 * d_h), "lstm.b"))

    def gate_weights(self, gate: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        k = GATES.index(gate)
        s = slice(k * self.d_h, (k + 1) * self.d_h)
        return self.W_x.data[:, s], self.W_h.data[:, s], self.b.data[s]

    def parameters(self) -> dict[str, Tensor]:
        return {"lstm.W_x": self.W_x, "lstm.W_h": self.W_h, "lstm.b": self.b}


def lstm_step(cell: LstmCell, h_prev: Tensor, c_prev: Tensor, x: Tensor) -> tuple[Tensor, Tensor]:
    d = cell.d_h
    if h_prev.shape != (d,) or c_prev.shape != (d,) or x.shape != (cell.d_x,):
        raise DimensionError(
            f"lstm_step: h{h_prev.shape}, c{c_prev.shape}, x{x.shape} vs cell d_x={cell.d_x}, d_h={d}"
        )
    Wx, Wh, b = cell.W_x.data, cell.W_h.data, cell.b.data
    xd, hd, cd = x.data, h_prev.data, c_prev.data
    z = xd @ Wx + hd @ Wh + b
    ifo = T.sigmoid_value(z[: 3 * d])
    i, f, o = ifo[:d], ifo[d:2 * d], ifo[2 * d:]
    g = np.tanh(z[3 * d:])
    c = f * cd + i * g
    tc = np.tanh(c)
    h = o * tc

    def back(grad):
        gh, gc = grad[:d], grad[d:]
        do = gh * tc
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([dc * g * i * (1.0 - i), dc * cd * f * (1.0 - f), do * o * (1.0 - o),
                             dc * i * (1.0 - g * g)])
        return (np.outer(xd, dz), np.outer(hd, dz), dz, Wh @ dz, dc * f, Wx @ dz)

    hc = T.apply("lstm_step", np.concatenate([h, c]), (cell.W_x, cell.W_h, cell.b, h_prev, c_prev, x), back)
    if not hc.requires_grad:
        return Tensor(h), Tensor(c)
    return T.take(hc, slice(0, d)), T.take(hc, slice(d, 2 * d))


# class-factorized softmax ----------------------------------------------------


def assign_classes(vocab_counts: Mapping, n_classes: int) -> dict:
    """Frequency binning: sort by (count desc, key asc) and cut into ``n_classes``
    contiguous buckets of roughly equal total count.  Every class is non-empty."""
    words = sorted(vocab_counts, key=lambda w: (-vocab_counts[w], w))
    n = len(words)
    if n_classes < 1 or n_classes > n:
        raise ConfigurationError(f"class count {n_classes} must be in [1, {n}]")
    total = float(sum(vocab_counts[w] for w in words))
    out = {}
    cls = 0
    before = 0.0
    for k, w in enumerate(words):
        if k > 0:
            target = int(before * n_classes / total) if total > 0 else cls
            target = min(max(target, cls), cls + 1)
            # force a new class when remaining words only just cover remaining classes
            if n - k == n_classes - 1 - cls:
                target = cls + 1
            cls = target
        out[w] = cls
        before += vocab_counts[w]
    return out


def default_class_count(vocab_size: int) -> int:
    return max(1, math.ceil(math.sqrt(vocab_size)))


class CfsmLayer:
    """Two-step softmax: P(word) = P(class | rep) * P(word | class, rep).

    Word-prediction weights live in one ``(V, d_h)`` matrix whose rows are grouped
    by class; only the rows of the relevant class are touched per query.
    """

    def __init__(self, d_h: int, class_of: np.ndarray, W_class: Tensor, b_class: Tensor,
                 W_word: Tensor, b_word: Tensor):
        class_of = np.asarray(class_of, dtype=np.int64)
        V = class_of.size
        C = int(class_of.max()) + 1 if V else 0
        if V == 0 or set(np.unique(class_of)) != set(range(C)):
            raise ConfigurationError("class assignment must cover classes 0..C-1 with no empty class")
        if W_class.shape != (d_h, C) or b_class.shape != (C,) or W_word.shape != (V, d_h) or b_word.shape != (V,):
            raise DimensionError(
                f"CfsmLayer: shapes {W_class.shape}, {b_class.shape}, {W_word.shape}, {b_word.shape} "
                f"inconsistent with d_h={d_h}, C={C}, V={V}"
            )
        self.d_h = d_h
        self.class_of = class_of
        self.n_classes = C
        self.vocab_size = V
        self.members = [np.flatnonzero(class_of == c) for c in range(C)]
        self.position = np.empty(V, dtype=np.int64)
        for m in self.members:
            self.position[m] = np.arange(m.size)
        self.W_class = W_class
        self.b_class = b_class
        self.W_word = W_word
        self.b_word = b_word

    @classmethod
    def create(cls, d_h: int, class_of, init: GlorotInit | None = None) -> "CfsmLayer":
        class_of = np.asarray(class_of, dtype=np.int64)
        V, C = class_of.size, int(class_of.max()) + 1
        if init is None:
            Wc, Ww = np.zeros((d_h, C)), np.zeros((V, d_h))
        else:
            Wc, Ww = init.matrix(d_h, C), init.matrix(V, d_h)
        return cls(d_h, class_of, T.parameter(Wc, "cfsm.W_class"), T.parameter(np.zeros(C), "cfsm.b_class"),
                   T.parameter(Ww, "cfsm.W_word"), T.parameter(np.zeros(V), "cfsm.b_word"))

    def parameters(self) -> dict[str, Tensor]:
        return {"cfsm.W_class": self.W_class, "cfsm.b_class": self.b_class,
                "cfsm.W_word": self.W_word, "cfsm.b_word": self.b_word}

    def log_probs(self, rep: np.ndarray) -> np.ndarray:
        """Full log-distribution over the vocabulary (no gradient)."""
        cl = rep @ self.W_class.data + self.b_class.data
        lpc = _log_normalize(cl)
        wl = self.W_word.data @ rep + self.b_word.data
        out = np.empty(self.vocab_size)
        for c, m in enumerate(self.members):
            s = wl[m]
            out[m] = lpc[c] + _log_normalize(s)
        return out

    def sample(self, rep: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
        cl = rep @ self.W_class.data + self.b_class.data
        lpc = _log_normalize(cl)
        c = int(rng.choice(self.n_classes, p=_probs(lpc)))
        m = self.members[c]
        s = self.W_word.data[m] @ rep + self.b_word.data[m]
        lpw = _log_normalize(s)
        k = int(rng.choice(m.size, p=_probs(lpw)))
        return int(m[k]), float(lpc[c] + lpw[k])


def _log_normalize(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max()
    return shifted - np.log(np.exp(shifted).sum())


def _probs(logp: np.ndarray) -> np.ndarray:
    p = np.exp(logp)
    return p / p.sum()


def cfsm_log_prob(layer: CfsmLayer, rep: Tensor, word: int) -> Tensor:
    if not 0 <= word < layer.vocab_size:
        raise VocabularyError(f"word id {word} not in vocabulary of size {layer.vocab_size}")
    if rep.shape != (layer.d_h,):
        raise DimensionError(f"cfsm_log_prob: representation shape {rep.shape}, expected ({layer.d_h},)")
    r = rep.data
    Wc, Ww = layer.W_class.data, layer.W_word.data
    c = int(layer.class_of[word])
    members = layer.members[c]
    k = int(layer.position[word])
    cl = r @ Wc + layer.b_class.data
    lpc = _log_normalize(cl)
    Wm = Ww[members]
    wl = Wm @ r + layer.b_word.data[members]
    lpw = _log_normalize(wl)

    def back(g):
        g = float(g)
        dcl = -np.exp(lpc) * g
        dcl[c] += g
        dwl = -np.exp(lpw) * g
        dwl[k] += g
        drep = Wc @ dcl + Wm.T @ dwl
        return (drep, np.outer(r, dcl), dcl, T.RowGrad(members, np.outer(dwl, r)), T.RowGrad(members, dwl))

    return T.apply("cfsm_log_prob", np.asarray(lpc[c] + lpw[k]), (rep, layer.W_class, layer.b_class,
                                                                     layer.W_word, layer.b_word), back)
