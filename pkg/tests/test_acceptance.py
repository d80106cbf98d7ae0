"""Acceptance suite: one test per headline criterion, each at its stated tolerance and
time budget.  Every test prints (and records) a single PASS/FAIL line; the lines are
repeated in the pytest terminal summary.

The toy-scale behavioural runs (language-model win, entity prediction, reranking
oracle) train real models and take several minutes in total.
"""

import math
import time

import numpy as np
import pytest

from conftest import make_model
from entitynlm.cli import main as cli_main
from entitynlm.corpus import build_vocab, encode
from entitynlm.entity_state import replay, spans_to_annotations
from entitynlm.evaluate import CorefPartition, b_cubed_f1, exact_marginal, muc_f1, perplexity_is, total_mass
from entitynlm.experiments import entity_prediction_run, lm_win, rerank_oracle
from entitynlm.model import Document
from entitynlm.rerank import kbest
from entitynlm.tensor import Tensor
from fixtures import EXAMPLE_E, EXAMPLE_L, EXAMPLE_MENTIONS, EXAMPLE_R, EXAMPLE_SENT1, EXAMPLE_SENT2, running_example_document
from test_model import doc_grad_check, registry_with
from test_rerank import HAND, check_kbest_contracts, random_scores

VERDICTS: list[str] = []


def verdict(name: str, ok: bool, detail: str, seconds: float) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail} [{seconds:.1f}s]"
    VERDICTS.append(line)
    print(line)
    assert ok, line


class Clock:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


def test_gradient_suite():
    with Clock() as c:
        worst = {}
        for seed in range(5):
            for name, err in doc_grad_check(seed).items():
                worst[name] = max(worst.get(name, 0.0), err)
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-4 and c.seconds < 60
    verdict("gradients", ok, f"{len(worst)} groups x 5 seeds, max rel err {worst[top]:.2e} ({top}) < 1e-4",
            c.seconds)


def _random_model(seed):
    rng = np.random.default_rng(seed)
    vocab = int(rng.integers(3, 13))
    m = make_model(vocab_size=vocab, d=int(rng.integers(2, 7)), l_max=int(rng.integers(1, 5)),
                   n_classes=int(rng.integers(1, vocab + 1)), seed=seed)
    scale = rng.uniform(0.1, 3.0)
    for p in m.parameters().values():
        p.data += rng.normal(scale=scale, size=p.shape)
    return m, rng


def test_normalization_suite():
    worst = 0.0
    with Clock() as c:
        for seed in range(100):
            m, rng = _random_model(seed)
            h = np.random.default_rng(seed).normal(scale=2.0, size=m.config.d_h)
            h = Tensor(h)
            sample = m.sample_document(8, rng)
            sm = registry_with(m, sample.annotations, seed)
            e = sm.registry.embeddings[1]
            sums = [
                np.exp(m.dist_r(h).data).sum(),
                np.exp(m.dist_e(h, sm.registry, len(sample.annotations)).data).sum(),
                np.exp(m.dist_l(h, e).data).sum(),
                sum(math.exp(m.dist_x(h, e, w).item()) for w in range(m.config.vocab_size)),
            ]
            worst = max(worst, max(abs(s - 1.0) for s in sums))
    ok = worst < 1e-10 and c.seconds < 60
    verdict("normalization", ok, f"dist_r/e/l/x over 100 parameterizations, max |sum - 1| {worst:.1e} < 1e-10",
            c.seconds)


MICRO_DOCS = [[0], [3, 1], [4, 4], [2, 0, 1], [1, 1, 1], [0, 4, 2], [3, 2, 1, 0], [4, 0, 4, 0], [2, 2, 3, 1],
              [1, 3, 0, 4]]


def test_enumeration_oracle():
    mass_err = rel_err = 0.0
    with Clock() as c:
        for k, words in enumerate(MICRO_DOCS):
            m = make_model(vocab_size=5, d=4, l_max=2, n_classes=2, seed=100 + k, sigma=0.0)
            mass_err = max(mass_err, abs(total_mass(m, len(words)) - 1.0))
            exact = exact_marginal(m, words)
            rep = perplexity_is(m, [Document(words, [])], n=20_000, rng=k, oracle=True)
            rel_err = max(rel_err, abs(math.exp(rep.per_document[0] - exact) - 1.0))
    ok = mass_err <= 1e-8 and rel_err < 0.02 and c.seconds < 300
    verdict("enumeration oracle", ok, f"10 micro docs, max |mass - 1| {mass_err:.1e} <= 1e-8, "
            f"max IS(N=20000) rel err {rel_err:.2%} < 2%", c.seconds)


def test_running_example_replay():
    with Clock() as c:
        n = len(EXAMPLE_SENT1) + len(EXAMPLE_SENT2)
        ann = spans_to_annotations(n, EXAMPLE_MENTIONS)
        replay(ann)
        raw = running_example_document()
        enc = encode(raw, build_vocab([raw], min_count=1), append_eod=False)
        rows = [([a.r for a in x], [a.e for a in x], [a.l for a in x]) for x in (ann, enc.annotations)]
    ok = all(r == (EXAMPLE_R, EXAMPLE_E, EXAMPLE_L) for r in rows) and c.seconds < 1
    verdict("running-example replay", ok, f"R/E/L rows over {n} tokens match exactly", c.seconds)


def test_language_model_win():
    with Clock() as c:
        runs = [lm_win(seed) for seed in range(3)]
    margins = [r["margin"] for r in runs]
    median = float(np.median(margins))
    ok = median > 0 and c.seconds < 15 * 60
    detail = ", ".join(f"{r['entitynlm']:.2f} vs {r['entity_blind']:.2f}" for r in runs)
    verdict("language-model win", ok, f"held-out ppl entitynlm vs entity-blind: {detail}; "
            f"median margin {median:+.3f} > 0", c.seconds)


def test_entity_prediction():
    with Clock() as c:
        run = entity_prediction_run(0)
    gap = run["accuracy"] - run["always_new"]
    ok = run["accuracy"] >= 0.95 and gap >= 0.20 and c.seconds < 10 * 60
    verdict("entity prediction", ok, f"accuracy {run['accuracy']:.1%} >= 95% over {run['predictions']} slots, "
            f"always-new {run['always_new']:.1%} (gap {gap:+.1%} >= 20 points)", c.seconds)


def test_kbest_contracts():
    with Clock() as c:
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            check_kbest_contracts(random_scores(rng, int(rng.integers(1, 8))), int(rng.integers(1, 12)))
        hand = [t.antecedents for t in kbest(HAND, 5).trees]
    ok = hand == [(None, 0, 1), (None, 0, None), (None, None, 1), (None, None, 1), (None, None, 1)] \
        and c.seconds < 60
    verdict("k-best contracts", ok, "1000 random fixtures hold every invariant; hand fixture order matches",
            c.seconds)


def test_rerank_oracle():
    with Clock() as c:
        run = rerank_oracle(0)
    ok = (run["gold_first"] >= 0.8 and run["combined_conll2"] >= run["base_conll2"] and c.seconds < 10 * 60)
    verdict("rerank oracle", ok, f"gold first {run['gold_first']:.1%} >= 80% of {run['documents']} docs; "
            f"combined CoNLL-2 {run['combined_conll2']:.4f} >= base {run['base_conll2']:.4f} "
            f"(alpha {run['alpha']}, beta {run['beta']})", c.seconds)


def test_scorer_fixtures():
    with Clock() as c:
        gold = CorefPartition.from_clusters([{"a", "b", "c"}])
        sys_ = CorefPartition.from_clusters([{"a", "b"}, {"c"}])
        muc, b3 = muc_f1(gold, sys_), b_cubed_f1(gold, sys_)
    ok = (muc.recall, muc.precision) == (0.5, 1.0) and b3.precision == 1.0 and math.isclose(b3.recall, 5 / 9,
                                                                                               abs_tol=1e-15)
    verdict("scorer fixtures", ok, f"MUC R={muc.recall} P={muc.precision}; B3 R={b3.recall:.15f} (5/9) "
            f"P={b3.precision}", c.seconds)


def _pipeline(root):
    root.mkdir()
    corpus, model = root / "corpus.jsonl", root / "model.ckpt"
    codes = [
        cli_main(["--seed", "7", "synth", "--out", str(corpus), "num_docs=20"]),
        cli_main(["--seed", "7", "train", "--train", str(corpus), "--out", str(model), "--quiet", "epochs=2"]),
        cli_main(["--seed", "7", "eval-lm", "--model", str(model), "--data", str(corpus), "--samples", "10",
                  "--out", str(root / "lm.json")]),
        cli_main(["--seed", "7", "eval-entity", "--model", str(model), "--data", str(corpus),
                  "--out", str(root / "entity.json")]),
    ]
    files = {p.name: p.read_bytes() for p in sorted(root.iterdir()) if not p.name.endswith(".log")}
    return codes, files


def test_pipeline_determinism(tmp_path):
    with Clock() as c:
        codes_a, a = _pipeline(tmp_path / "a")
        codes_b, b = _pipeline(tmp_path / "b")
    ok = codes_a == codes_b == [0, 0, 0, 0] and a == b and len(a) == 4
    verdict("determinism", ok, f"synth -> train -> eval-lm/eval-entity twice: {len(a)} artifacts byte-identical",
            c.seconds)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
