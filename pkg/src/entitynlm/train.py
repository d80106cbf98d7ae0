"""Per-document training on the joint log-probability, optimizers and model selection."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .corpus import EncodedDocument, Vocabulary
from .entity_state import L_MAX
from .errors import ConfigurationError, NumericalError
from .model import Document, EntityNLM, ModelConfig
from .nn import assign_classes, default_class_count
from .tensor import Tensor

DEFAULT_LR = {"adagrad": 0.1, "adam": 0.001}
DROPOUT_GRID = (0.2, 0.5)
DIM_GRID = (32, 48, 64, 128, 256)


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float | None = None
    dropout: float = 0.2
    d_x: int = 32
    d_h: int = 32
    d_e: int | None = None
    epochs: int = 10
    seed: int = 0
    patience: int = 3
    clip: float = 5.0
    sigma: float = 0.01
    l_max: int = L_MAX
    n_classes: int | None = None
    min_count: int = 2
    entity_blind: bool = False
    off_grid: bool = False  # permit values outside the declared search grids

    def __post_init__(self):
        if self.optimizer not in DEFAULT_LR:
            raise ConfigurationError(f"optimizer must be one of {sorted(DEFAULT_LR)}, got {self.optimizer!r}")
        if self.lr is None:
            self.lr = DEFAULT_LR[self.optimizer]
        if self.lr < 0 or self.epochs < 0 or self.patience < 1 or self.clip <= 0:
            raise ConfigurationError("lr and epochs must be >= 0, patience >= 1, clip > 0")
        if not self.off_grid:
            if self.lr != DEFAULT_LR[self.optimizer]:
                raise ConfigurationError(f"lr {self.lr} off grid for {self.optimizer} (set off_grid=true)")
            if self.dropout not in DROPOUT_GRID:
                raise ConfigurationError(f"dropout {self.dropout} not in {DROPOUT_GRID} (set off_grid=true)")
            for k in ("d_x", "d_h", "d_e"):
                if getattr(self, k) not in DIM_GRID + (None,):
                    raise ConfigurationError(f"{k}={getattr(self, k)} not in {DIM_GRID} (set off_grid=true)")

    @property
    def entity_dim(self) -> int:
        """d_e, which defaults to (and must equal) d_h."""
        return self.d_h if self.d_e is None else self.d_e

    def model_config(self, vocab_size: int, eod_id: int | None = None) -> ModelConfig:
        return ModelConfig(vocab_size, d_x=self.d_x, d_h=self.d_h, d_e=self.entity_dim, l_max=self.l_max,
                           n_classes=self.n_classes or default_class_count(vocab_size), sigma=self.sigma,
                           dropout=self.dropout, entity_blind=self.entity_blind, eod_id=eod_id)


# config files ------------------------------------------------------------------------


def _coerce(name: str, raw, default_type):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if text.lower() in ("none", "null"):
        return None
    if default_type is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigurationError(f"{name}: expected a boolean, got {raw!r}")
    if default_type in (int, float):
        try:
            return default_type(text)
        except ValueError:
            raise ConfigurationError(f"{name}: expected {default_type.__name__}, got {raw!r}") from None
    return text


TRAIN_FIELD_TYPES = {"optimizer": str, "lr": float, "dropout": float, "d_x": int, "d_h": int, "d_e": int,
                "epochs": int, "seed": int, "patience": int, "clip": float, "sigma": float, "l_max": int,
                "n_classes": int, "min_count": int, "entity_blind": bool, "off_grid": bool}


def parse_settings(pairs: dict, known: dict | None = None) -> dict:
    """Validate keys against ``known`` (name -> type) and coerce string values."""
    known = known or TRAIN_FIELD_TYPES
    unknown = sorted(set(pairs) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
    return {k: _coerce(k, v, known[k]) for k, v in pairs.items()}


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines (``#`` comments) or a JSON object."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
    out = {}
    for k, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{k}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_overrides(items: Sequence[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def load_train_config(path=None, overrides: Sequence[str] = (), **explicit) -> TrainConfig:
    settings = read_config_file(path) if path is not None else {}
    settings.update(parse_overrides(overrides))
    settings.update(explicit)
    return TrainConfig(**parse_settings(settings))


# optimizers -------------------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str
    lr: float
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    slots: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DEFAULT_LR:
            raise ConfigurationError(f"unknown optimizer {self.kind!r}")

    def update(self, params: dict[str, Tensor]) -> None:
        self.step += 1
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            slot = self.slots.setdefault(name, {})
            if self.kind == "adagrad":
                acc = slot.setdefault("sum_sq", np.zeros_like(p.data))
                acc += g * g
                # rows/entries never touched have acc == 0 and g == 0
                p.data -= self.lr * np.divide(g, np.sqrt(acc), out=np.zeros_like(g), where=acc > 0)
            else:
                m = slot.setdefault("m", np.zeros_like(p.data))
                v = slot.setdefault("v", np.zeros_like(p.data))
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                m_hat = m / (1 - self.beta1 ** self.step)
                v_hat = v / (1 - self.beta2 ** self.step)
                p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(config: TrainConfig) -> OptimizerState:
    return OptimizerState(config.optimizer, config.lr)


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Rescale all gradients to a global L2 norm of at most ``max_norm``; returns the raw norm."""
    sq = sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None)
    norm = math.sqrt(sq)
    if norm > max_norm:
        k = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= k
    return norm


# training --------------------------------------------------------------------------


def as_document(doc: EncodedDocument | Document) -> Document:
    return doc if isinstance(doc, Document) else Document(doc.words, doc.annotations)


def doc_id(doc, k: int) -> str:
    return getattr(doc, "id", None) or f"#{k}"


def build_model(config: TrainConfig, vocab: Vocabulary) -> EntityNLM:
    mc = config.model_config(len(vocab), vocab.eod_id)
    classes = assign_classes(vocab.class_counts(), mc.n_classes)
    class_of = np.array([classes[i] for i in range(len(vocab))])
    return EntityNLM(mc, class_of, seed=config.seed)


def train_epoch(model: EntityNLM, opt: OptimizerState, docs: Sequence, config: TrainConfig,
                rng: np.random.Generator, q_opt: OptimizerState | None = None) -> float:
    """One pass of per-document updates in shuffled order.  Returns the mean per-token
    joint log-probability observed during the pass.

    With ``q_opt`` the proposal heads are also fitted, after each generative step,
    to the document's gold annotations (a separate loss touching only those heads).
    """
    params = model.trainable()
    q_params = model.proposal.parameters()
    fit_q = q_opt is not None and not model.config.entity_blind
    total, n_tokens = 0.0, 0
    for k in rng.permutation(len(docs)):
        doc = docs[int(k)]
        d = as_document(doc)
        noise_rng = np.random.default_rng(rng.integers(2**63))
        drop_rng = np.random.default_rng(rng.integers(2**63)) if model.config.dropout > 0 else None
        model.zero_grad()
        try:
            with T.Tape() as tape:
                lp, _ = model.doc_log_prob(d, noise_rng=noise_rng, dropout_rng=drop_rng)
                loss = -lp
            if not math.isfinite(loss.item()):
                raise NumericalError("non-finite loss")
            tape.backward(loss)
        except NumericalError as exc:
            raise NumericalError(f"document {doc_id(doc, int(k))}: {exc}") from None
        clip_gradients(params, config.clip)
        opt.update(params)
        if fit_q:
            try:
                with T.Tape() as tape:
                    q_loss = -model.proposal_log_prob(d, noise_rng=np.random.default_rng(int(k)))
                tape.backward(q_loss)
            except NumericalError as exc:
                raise NumericalError(f"document {doc_id(doc, int(k))}: proposal: {exc}") from None
            clip_gradients(q_params, config.clip)
            q_opt.update(q_params)
        total += lp.item()
        n_tokens += len(d.words)
    model.zero_grad()
    return total / max(n_tokens, 1)


def joint_log_prob(model: EntityNLM, docs: Sequence) -> tuple[float, int]:
    """Sum of teacher-forced log P(X, R, E, L) (natural log) and token count.  Uses
    a fixed noise seed and no dropout, so repeated calls agree exactly."""
    total, n = 0.0, 0
    for doc in docs:
        d = as_document(doc)
        lp, _ = model.doc_log_prob(d, noise_rng=np.random.default_rng(0))
        total += lp.item()
        n += len(d.words)
    return total, n


def joint_perplexity(model: EntityNLM, docs: Sequence) -> float:
    """2 ** (-(1/T) * sum of log2 joint probabilities)."""
    total, n = joint_log_prob(model, docs)
    if n == 0:
        raise ConfigurationError("joint perplexity of an empty document set")
    return float(2.0 ** (-(total / math.log(2.0)) / n))


def select_model(dev_docs: Sequence, candidates: Sequence[EntityNLM]) -> tuple[int, list[float]]:
    """Index of the candidate with the lowest annotated-dev joint perplexity (first on ties)."""
    if not dev_docs:
        raise ConfigurationError("model selection needs a non-empty dev set")
    if not candidates:
        raise ConfigurationError("no candidate models")
    ppls = [joint_perplexity(m, dev_docs) for m in candidates]
    best = min(range(len(ppls)), key=lambda i: (ppls[i], i))
    return best, ppls


@dataclass
class EpochRecord:
    epoch: int
    objective: float
    dev_perplexity: float | None
    seconds: float

    def line(self) -> str:
        dev = "nan" if self.dev_perplexity is None else f"{self.dev_perplexity:.6f}"
        return f"epoch {self.epoch} objective {self.objective:.6f} dev_ppl {dev} time {self.seconds:.1f}s"


@dataclass
class TrainResult:
    model: EntityNLM
    history: list[EpochRecord]
    best_epoch: int


def train(config: TrainConfig, vocab: Vocabulary, train_docs: Sequence, dev_docs: Sequence = (),
          log: Callable[[str], None] | None = None, model: EntityNLM | None = None) -> TrainResult:
    """Train for ``config.epochs`` epochs with early stopping on dev joint perplexity.

    Returns the parameters of the best dev epoch (the last epoch without a dev set).
    """
    model = model if model is not None else build_model(config, vocab)
    opt = make_optimizer(config)
    q_opt = make_optimizer(config)
    rng = np.random.default_rng(config.seed)
    history: list[EpochRecord] = []
    best, best_ppl, best_epoch, stale = model.copy(), math.inf, 0, 0
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        objective = train_epoch(model, opt, train_docs, config, rng, q_opt)
        ppl = joint_perplexity(model, dev_docs) if dev_docs else None
        rec = EpochRecord(epoch, objective, ppl, time.perf_counter() - start)
        history.append(rec)
        if log:
            log(rec.line())
        if ppl is None or ppl < best_ppl:
            best, best_ppl, best_epoch, stale = model.copy(), (ppl if ppl is not None else math.inf), epoch, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return TrainResult(best, history, best_epoch)


def config_hash(config) -> str:
    return hashlib.sha256(json.dumps(asdict(config), sort_keys=True).encode()).hexdigest()[:16]


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
