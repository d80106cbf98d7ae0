"""Command-line entry point.

    entitynlm [--config PATH] [--seed N] [--workers N] SUBCOMMAND [flags] [key=value ...]

Subcommands: synth, train, eval-lm, eval-entity, rerank, sample, inspect.  Trailing
``key=value`` pairs override settings read from ``--config`` (TrainConfig fields for
``train``, SynthSpec fields for ``synth``).  ``ENTITYNLM_CONFIG`` names the default
config file for ``train``.

Exit codes: 0 success, 1 other failure, 2 usage/configuration, 3 ingestion (unreadable
or malformed inputs), 4 numerical failure.  Outputs are written to a temporary file
and renamed into place, so a failed run leaves no partial artifacts.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import tempfile
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import (
    Mention,
    RawDocument,
    SynthSpec,
    Vocabulary,
    build_vocab,
    encode_corpus,
    flat_spans,
    preprocess,
    read_documents,
    synth_corpus,
    write_documents,
)
from .entity_state import annotations_to_spans
from .errors import ConfigurationError, EntityNLMError, IngestionError, NumericalError, VocabularyError
from .evaluate import SCHEMA_VERSION, EntityProtocol, always_new_baseline, entity_prediction, perplexity_is, report_record
from .model import load_checkpoint, save_checkpoint
from .rerank import (
    DEFAULT_K,
    base_score,
    gold_tree,
    inject,
    kbest,
    read_pair_scores,
    rerank,
    simulate_pair_scores,
    write_pair_scores,
)
from .train import TRAIN_FIELD_TYPES, TrainConfig, config_hash, parse_overrides, parse_settings, read_config_file, train

CONFIG_ENV = "ENTITYNLM_CONFIG"

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_INGESTION, EXIT_NUMERICAL = 0, 1, 2, 3, 4

SYNTH_PRESETS = ("default", "names", "recency", "rerank")


class CLIError(Exception):
    def __init__(self, code: int, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.code = code
        self.stage = stage


class _UsageParser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(EXIT_USAGE, "arguments", message)


def _default_code(exc: BaseException) -> int:
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, ConfigurationError):
        return EXIT_USAGE
    if isinstance(exc, (IngestionError, VocabularyError)):
        return EXIT_INGESTION
    return EXIT_FAILURE


@contextlib.contextmanager
def stage(name: str, code: int | None = None):
    """Attribute any library or I/O error to ``name``.  ``code`` (if given) replaces the
    type-based exit code, except that numerical failures always exit with 4."""
    try:
        yield
    except CLIError:
        raise
    except (EntityNLMError, OSError) as exc:
        exit_code = code if code is not None and not isinstance(exc, NumericalError) else _default_code(exc)
        raise CLIError(exit_code, name, str(exc) or type(exc).__name__) from exc


def atomic_write(path, write: Callable[[str], None]) -> None:
    """Run ``write(tmp)`` then rename ``tmp`` to ``path``; nothing is left behind on failure."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def _write_json(records: Sequence[dict], out: str | None) -> None:
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    if out is None:
        sys.stdout.write(text)
    else:
        atomic_write(out, lambda tmp: Path(tmp).write_text(text, encoding="utf-8"))


def _settings(args, known: dict, use_env: bool) -> dict:
    path = args.config or (os.environ.get(CONFIG_ENV) if use_env else None)
    with stage("config", EXIT_USAGE):
        raw = {}
        if path is not None:
            if not Path(path).is_file():
                raise ConfigurationError(f"config file {path} not found")
            raw = read_config_file(path)
        raw.update(parse_overrides(args.overrides))
        return parse_settings(raw, known)


# shared loading ------------------------------------------------------------------------


def _read_corpus(path) -> list[RawDocument]:
    with stage(f"read corpus {path}", EXIT_INGESTION):
        if not Path(path).is_file():
            raise IngestionError(f"{path} not found")
        docs = [preprocess(d) for d in read_documents(path)]
        if not docs:
            raise IngestionError(f"{path} contains no documents")
        return docs


def _load_model(path):
    with stage(f"load checkpoint {path}", EXIT_INGESTION):
        model, header = load_checkpoint(path)
        if not header.get("vocab"):
            raise IngestionError(f"{path}: checkpoint carries no vocabulary")
        return model, Vocabulary(header["vocab"], {}), header


def _seed(args, fallback: int = 0) -> int:
    return fallback if args.seed is None else args.seed


# subcommands ---------------------------------------------------------------------------


def _synth_preset(name: str) -> SynthSpec:
    if name == "default":
        return SynthSpec()
    from . import experiments

    return {"names": experiments.NAMES_SPEC, "recency": experiments.RECENCY_SPEC,
            "rerank": experiments.RERANK_SPEC}[name]


def cmd_synth(args) -> None:
    known = {f.name: type(f.default) for f in fields(SynthSpec)}
    settings = _settings(args, known, use_env=False)
    with stage("config", EXIT_USAGE):
        try:
            spec = replace(_synth_preset(args.preset), **settings)
        except IngestionError as exc:
            raise ConfigurationError(str(exc)) from None
    seed = _seed(args)
    with stage("synthesize"):
        docs = [preprocess(d) for d in synth_corpus(spec, seed)]
    with stage(f"write {args.out}"):
        atomic_write(args.out, lambda tmp: write_documents(docs, tmp))
    if args.pair_scores:
        rng = np.random.default_rng(seed + 1)
        scores = []
        for d in docs:
            spans = flat_spans(d)
            if len(spans) >= 2:
                scores.append(simulate_pair_scores(d.id, d.n_tokens, [(s, e) for s, e, _ in spans],
                                                   [c for _, _, c in spans], rng, noise=args.noise))
        with stage(f"write {args.pair_scores}"):
            atomic_write(args.pair_scores, lambda tmp: write_pair_scores(scores, tmp))


def cmd_train(args) -> None:
    settings = _settings(args, TRAIN_FIELD_TYPES, use_env=True)
    if args.seed is not None:
        settings["seed"] = args.seed
    with stage("config", EXIT_USAGE):
        config = TrainConfig(**settings)
    train_raw = _read_corpus(args.train)
    dev_raw = _read_corpus(args.dev) if args.dev else []
    with stage("vocabulary", EXIT_INGESTION):
        vocab = build_vocab(train_raw, min_count=config.min_count)
        train_docs = encode_corpus(train_raw, vocab, l_max=config.l_max)
        dev_docs = encode_corpus(dev_raw, vocab, l_max=config.l_max)
    lines: list[str] = []

    def log(line: str) -> None:
        lines.append(line)
        if not args.quiet:
            print(line, file=sys.stderr, flush=True)

    with stage("train"):
        result = train(config, vocab, train_docs, dev_docs, log=log)
    extra = {"train_config": asdict(config), "config_hash": config_hash(config), "best_epoch": result.best_epoch,
             "history": [[r.epoch, r.objective, r.dev_perplexity] for r in result.history]}
    log_path = args.log or f"{args.out}.log"
    with stage(f"write {args.out}"):
        atomic_write(args.out, lambda tmp: save_checkpoint(result.model, tmp, vocab.words, extra))
        atomic_write(log_path, lambda tmp: Path(tmp).write_text("".join(f"{x}\n" for x in lines), encoding="utf-8"))


def cmd_eval_lm(args) -> None:
    model, vocab, header = _load_model(args.model)
    docs = _read_corpus(args.data)
    with stage("encode", EXIT_INGESTION):
        enc = encode_corpus(docs, vocab, l_max=model.config.l_max)
    seed = _seed(args)
    with stage("evaluate"):
        rep = perplexity_is(model, enc, n=args.samples, rng=seed, oracle=args.oracle, workers=args.workers)
    rec = report_record("perplexity_is", rep.perplexity, n=args.samples, seed=seed,
                        config_hash=header.get("extra", {}).get("config_hash"), n_tokens=rep.n_tokens,
                        log_prob=rep.log_prob, documents=len(enc), vocab_hash=vocab.hash,
                        per_document=[{"id": d.id, "log_prob": lp} for d, lp in zip(enc, rep.per_document)])
    with stage("write report"):
        _write_json([rec], args.out)


def cmd_eval_entity(args) -> None:
    model, vocab, header = _load_model(args.model)
    docs = _read_corpus(args.data)
    with stage("encode", EXIT_INGESTION):
        enc = encode_corpus(docs, vocab, l_max=model.config.l_max)
    protocol = EntityProtocol(skip_sentences=args.skip_sentences, max_predictions=args.max_predictions)
    with stage("evaluate"):
        acc = entity_prediction(model, enc, protocol)
        base = always_new_baseline(enc, protocol)
    rec = report_record("entity_prediction_accuracy", acc.accuracy, n=acc.total, seed=_seed(args),
                        config_hash=header.get("extra", {}).get("config_hash"), correct=acc.correct,
                        always_new_accuracy=base.accuracy, always_new_correct=base.correct,
                        protocol=asdict(protocol), documents=len(enc))
    with stage("write report"):
        _write_json([rec], args.out)


def cmd_rerank(args) -> None:
    model, vocab, _ = _load_model(args.model)
    docs = _read_corpus(args.data)
    with stage("encode", EXIT_INGESTION):
        enc = {d.id: d for d in encode_corpus(docs, vocab, l_max=model.config.l_max)}
        gold_chains = {d.id: {(s, e): c for s, e, c in flat_spans(d)} for d in docs}
    with stage(f"read pair scores {args.scores}", EXIT_INGESTION):
        if not Path(args.scores).is_file():
            raise IngestionError(f"{args.scores} not found")
        all_scores = read_pair_scores(args.scores)
    records = []
    with stage("rerank"):
        for ps in all_scores:
            if ps.doc_id not in enc:
                raise IngestionError(f"pair scores for unknown document {ps.doc_id}")
            kb = kbest(ps, args.k)
            if args.inject_gold:
                chains = gold_chains[ps.doc_id]
                missing = [m for m in ps.mentions if m not in chains]
                if missing:
                    raise IngestionError(f"{ps.doc_id}: mentions {missing} are not annotated")
                gold = gold_tree([chains[m] for m in ps.mentions])
                kb = inject(kb, gold, base_score(ps, gold))
            res = rerank(model, enc[ps.doc_id].words, ps, kb, mode=args.mode, alpha=args.alpha, beta=args.beta)
            best = kb.trees[res.best]
            records.append({
                "schema_version": SCHEMA_VERSION, "id": ps.doc_id, "mode": args.mode, "alpha": args.alpha,
                "beta": args.beta, "k": len(kb), "best_position": res.best,
                "antecedents": list(best.antecedents),
                "clusters": [sorted(c) for c in best.partition().clusters],
                "candidates": [{"rank": r, "position": e.position, "log_p": e.log_p, "base": e.base,
                                "score": e.score} for r, e in enumerate(res.order)],
                "errors": res.errors,
            })
    with stage("write output"):
        _write_json(records, args.out)


def cmd_sample(args) -> None:
    model, vocab, _ = _load_model(args.model)
    rng = np.random.default_rng(_seed(args))
    out = []
    with stage("sample"):
        for k in range(args.n):
            doc = model.sample_document(args.max_len, rng)
            words = [vocab.words[w] for w in doc.words]
            if words and doc.words[-1] == vocab.eod_id:
                words = words[:-1]
            mentions = [Mention(f"e{e}", 0, s, min(t, len(words) - 1))
                        for s, t, e in annotations_to_spans(doc.annotations) if s < len(words)]
            out.append(RawDocument(f"sample-{k}", [words] if words else [], mentions))
    with stage(f"write {args.out}"):
        atomic_write(args.out, lambda tmp: write_documents(out, tmp))


def cmd_inspect(args) -> None:
    path = Path(args.path)
    with stage(f"inspect {path}", EXIT_INGESTION):
        if not path.is_file():
            raise IngestionError(f"{path} not found")
        with open(path, "rb") as fh:
            head = fh.read(16)
        from .model import MAGIC

        if head.startswith(MAGIC):
            model, header = load_checkpoint(path)
            params = model.all_parameters()
            summary = {
                "kind": "checkpoint", "config": header["config"], "vocab_size": len(header.get("vocab") or []),
                "vocab_hash": header.get("vocab_hash"), "n_parameters": int(sum(p.data.size for p in params.values())),
                "tensors": {k: list(p.shape) for k, p in params.items()}, "extra": header.get("extra", {}),
            }
        else:
            docs = read_documents(path)
            entities = [len({m.entity for m in d.mentions}) for d in docs]
            summary = {
                "kind": "corpus", "documents": len(docs), "tokens": sum(d.n_tokens for d in docs),
                "mentions": sum(len(d.mentions) for d in docs), "entities": sum(entities),
                "types": len({w for d in docs for s in d.sentences for w in s}),
            }
    summary["schema_version"] = SCHEMA_VERSION
    with stage("write report"):
        _write_json([summary], args.out)


# parser ----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key=value or JSON config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for all randomness")
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS, help="worker processes (default 1)")

    parser = _UsageParser(prog="entitynlm", description="Entity-aware neural language model toolkit.",
                          parents=[common])
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_UsageParser)
    sub.required = True

    def add(name, fn, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(fn=fn)
        return p

    p = add("synth", cmd_synth, "generate a synthetic annotated corpus (JSON lines)")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=SYNTH_PRESETS, default="default")
    p.add_argument("--pair-scores", help="also write simulated mention-pair scores for reranking")
    p.add_argument("--noise", type=float, default=1.0, help="noise of the simulated pair scores")

    p = add("train", cmd_train, "train a model and write a checkpoint plus an epoch log")
    p.add_argument("--train", required=True, help="training corpus (JSON lines)")
    p.add_argument("--dev", help="annotated dev corpus for early stopping")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="epoch log path (default: <out>.log)")
    p.add_argument("--quiet", action="store_true")

    p = add("eval-lm", cmd_eval_lm, "importance-sampled perplexity report")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--samples", type=int, default=100, help="importance samples per document")
    p.add_argument("--oracle", action="store_true", help="zero entity-init noise")
    p.add_argument("--out", help="report path (default: stdout)")

    p = add("eval-entity", cmd_eval_entity, "entity prediction accuracy with the always-new baseline")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--skip-sentences", type=int, default=EntityProtocol.skip_sentences)
    p.add_argument("--max-predictions", type=int, default=EntityProtocol.max_predictions)
    p.add_argument("--out", help="report path (default: stdout)")

    p = add("rerank", cmd_rerank, "rerank k-best coreference trees built from mention-pair scores")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="corpus whose token offsets the scores refer to")
    p.add_argument("--scores", required=True, help="mention-pair score file")
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--mode", choices=("lm", "combined"), default="lm")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--inject-gold", action="store_true", help="add the annotated tree to each list")
    p.add_argument("--out", help="output path (default: stdout)")

    p = add("sample", cmd_sample, "draw annotated documents from a model")
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--max-len", type=int, default=100)
    p.add_argument("--out", required=True)

    p = add("inspect", cmd_inspect, "summarize a checkpoint or a corpus")
    p.add_argument("path")
    p.add_argument("--out", help="report path (default: stdout)")

    for p in sub.choices.values():
        p.add_argument("overrides", nargs="*", metavar="key=value")
    return parser


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    args = build_parser().parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("workers", 1)):
        if not hasattr(args, name):
            setattr(args, name, default)
    if args.workers < 1:
        raise CLIError(EXIT_USAGE, "arguments", "--workers must be >= 1")
    if args.command not in ("synth", "train") and args.overrides:
        raise CLIError(EXIT_USAGE, "arguments", f"{args.command} takes no key=value overrides")
    return args


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
        args.fn(args)
    except CLIError as exc:
        print(f"entitynlm: error: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
