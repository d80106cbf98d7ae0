"""End-to-end checks of the command-line entry point."""

import json
import time

import pytest

from entitynlm.cli import EXIT_INGESTION, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, atomic_write, main, stage
from entitynlm.errors import NumericalError


@pytest.fixture
def corpus(tmp_path):
    path = tmp_path / "corpus.jsonl"
    scores = tmp_path / "pairs.tsv"
    assert main(["--seed", "1", "synth", "--out", str(path), "--pair-scores", str(scores), "num_docs=12"]) == EXIT_OK
    return path, scores


def _train(corpus_path, out, seed=0, *extra):
    return main(["--seed", str(seed), "train", "--train", str(corpus_path), "--out", str(out), "--quiet",
                 "epochs=1", *extra])


def test_missing_config_is_usage_error_without_artifacts(tmp_path, corpus):
    out = tmp_path / "model.ckpt"
    code = main(["train", "--config", str(tmp_path / "absent.cfg"), "--train", str(corpus[0]), "--out", str(out)])
    assert code == EXIT_USAGE
    assert not out.exists() and not (tmp_path / "model.ckpt.log").exists()
    assert sorted(p.name for p in tmp_path.iterdir()) == ["corpus.jsonl", "pairs.tsv"]


def test_env_var_names_default_config(tmp_path, corpus, monkeypatch):
    monkeypatch.setenv("ENTITYNLM_CONFIG", str(tmp_path / "absent.cfg"))
    assert _train(corpus[0], tmp_path / "m.ckpt") == EXIT_USAGE


def test_usage_errors(tmp_path, corpus, capsys):
    assert main(["frobnicate"]) == EXIT_USAGE
    assert _train(corpus[0], tmp_path / "m.ckpt", 0, "no_such_key=1") == EXIT_USAGE
    assert "config" in capsys.readouterr().err
    assert main(["synth", "--out", str(tmp_path / "x.jsonl"), "recurrence=2.0"]) == EXIT_USAGE
    assert main(["inspect", str(corpus[0]), "epochs=3"]) == EXIT_USAGE
    assert not (tmp_path / "x.jsonl").exists()


def test_ingestion_errors_name_the_stage(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "d", "sentences": [["a"]], "mentions": [["e", 0, 0, 5]]}\n')
    assert _train(bad, tmp_path / "m.ckpt") == EXIT_INGESTION
    assert "read corpus" in capsys.readouterr().err
    assert main(["inspect", str(tmp_path / "absent")]) == EXIT_INGESTION
    assert not (tmp_path / "m.ckpt").exists()


def test_config_file_and_overrides(tmp_path, corpus):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("epochs = 3  # overridden below\nd_h = 48\n")
    out = tmp_path / "m.ckpt"
    assert main(["train", "--config", str(cfg), "--train", str(corpus[0]), "--out", str(out), "--quiet",
                 "epochs=1"]) == EXIT_OK
    log = (tmp_path / "m.ckpt.log").read_text().splitlines()
    assert len(log) == 1 and log[0].startswith("epoch 1 ")
    main(["inspect", str(out), "--out", str(tmp_path / "summary.json")])
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["config"]["d_h"] == 48 and summary["extra"]["train_config"]["epochs"] == 1
    assert summary["schema_version"] >= 1


def test_same_seed_gives_identical_checkpoints(tmp_path, corpus):
    a, b, c = (tmp_path / f"{x}.ckpt" for x in "abc")
    assert _train(corpus[0], a, seed=5) == EXIT_OK
    assert _train(corpus[0], b, seed=5) == EXIT_OK
    assert _train(corpus[0], c, seed=6) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() != c.read_bytes()


def test_pipeline_synth_train_eval_entity(tmp_path, corpus):
    start = time.perf_counter()
    model = tmp_path / "m.ckpt"
    assert _train(corpus[0], model) == EXIT_OK
    report = tmp_path / "entity.json"
    assert main(["eval-entity", "--model", str(model), "--data", str(corpus[0]), "--out", str(report)]) == EXIT_OK
    rec = json.loads(report.read_text())
    assert rec["metric"] == "entity_prediction_accuracy" and 0 <= rec["value"] <= 1
    assert "always_new_accuracy" in rec and rec["schema_version"] >= 1
    assert time.perf_counter() - start < 600


def test_eval_lm_sample_rerank(tmp_path, corpus):
    model = tmp_path / "m.ckpt"
    assert _train(corpus[0], model) == EXIT_OK
    lm = tmp_path / "lm.json"
    assert main(["--seed", "2", "eval-lm", "--model", str(model), "--data", str(corpus[0]), "--samples", "3",
                 "--out", str(lm)]) == EXIT_OK
    rec = json.loads(lm.read_text())
    assert rec["metric"] == "perplexity_is" and rec["N"] == 3 and rec["value"] > 1
    # importance sampling is seeded and worker-count independent
    lm2 = tmp_path / "lm2.json"
    main(["--seed", "2", "eval-lm", "--model", str(model), "--data", str(corpus[0]), "--samples", "3",
          "--workers", "2", "--out", str(lm2)])
    assert lm.read_text() == lm2.read_text()

    samples = tmp_path / "s.jsonl"
    assert main(["sample", "--model", str(model), "--n", "3", "--max-len", "15", "--out", str(samples)]) == EXIT_OK
    assert len(samples.read_text().splitlines()) == 3

    out = tmp_path / "rr.jsonl"
    assert main(["rerank", "--model", str(model), "--data", str(corpus[0]), "--scores", str(corpus[1]),
                 "--k", "4", "--inject-gold", "--out", str(out)]) == EXIT_OK
    for line in out.read_text().splitlines():
        rec = json.loads(line)
        ranks = [c["rank"] for c in rec["candidates"]]
        assert ranks == list(range(len(ranks)))
        assert {"position", "log_p", "base"} <= set(rec["candidates"][0])
        assert rec["best_position"] == rec["candidates"][0]["position"]


def test_atomic_write_leaves_nothing_on_failure(tmp_path):
    def boom(tmp):
        open(tmp, "w").write("partial")
        raise RuntimeError("fail")

    with pytest.raises(RuntimeError):
        atomic_write(tmp_path / "out.txt", boom)
    assert list(tmp_path.iterdir()) == []


def test_numerical_errors_map_to_their_exit_code():
    from entitynlm.cli import CLIError

    with pytest.raises(CLIError) as info:
        with stage("train", EXIT_USAGE):
            raise NumericalError("nan loss")
    assert info.value.code == EXIT_NUMERICAL and info.value.stage == "train"
