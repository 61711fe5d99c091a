import json

import pytest

from cli import main, markdown_table
from runconfig import RESOLVED_CONFIG_NAME, read_resolved_config

TINY_RUN = {
    "preset": "desk",
    "model": {"model_dim": 16, "heads": 2, "ffn_dim": 32, "enc_layers": 1, "dec_layers": 1},
    "train": {"batch_size": 8, "warmup_steps": 0, "learning_rate": 3e-3, "log_every": 2, "max_epochs": 3},
    "bench": {"steps": 1, "warmup": 0, "gen_sentences": 1, "pairs": 4, "max_len": 4},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_RUN), encoding="utf-8")
    return str(path)


def test_oracle_prints_fingerprint(tmp_path, capsys):
    out = tmp_path / "oracle"
    code = main(["oracle", "--delta", "3", "--variant", "non_causal", "--pos-emb", "sinusoidal", "--out", str(out)])
    assert code == 0
    assert capsys.readouterr().out.strip().endswith("[1, 7]")
    assert json.loads((out / "oracle.json").read_text())["fingerprint"] == [1, 7]
    assert read_resolved_config(out / RESOLVED_CONFIG_NAME).probe.deltas == [3]


def test_oracle_rejects_conv_for_causal_variant(tmp_path):
    assert main(["oracle", "--delta", "2", "--variant", "removal", "--pos-emb", "conv", "--out", str(tmp_path)]) == 2


def test_leak_test_rejects_bad_delta(tmp_path):
    assert main(["leak-test", "--delta", "0", "--out", str(tmp_path)]) == 2


def test_leak_test_needs_a_selection(tmp_path):
    assert main(["leak-test", "--out", str(tmp_path)]) == 2


def test_oracle_only_grid(tmp_path):
    assert main(["leak-test", "--grid", "--oracle-only", "--out", str(tmp_path)]) == 0
    oracles = json.loads((tmp_path / "oracle.json").read_text())
    fingerprints = {(o["delta"], o["label"]): o["fingerprint"] for o in oracles}
    assert fingerprints[(3, "Sin")] == [1, 7]
    assert fingerprints[(4, "Sin")] == [1, 2, 5]
    assert fingerprints[(2, "Conv")] == [1, 3, 5, 7, 9, 11]
    assert (tmp_path / "leak_report.tsv").read_text().startswith("config\tdelta\tvariant\tpos")
    assert (tmp_path / "disagreements.txt").read_text() == ""
    assert "config sha256" in (tmp_path / "leak_report.md").read_text(encoding="utf-8")


def test_parallel_grid_merges_cells(tmp_path):
    code = main(["leak-test", "--grid", "--delta", "2", "--oracle-only", "--parallel", "2", "--out", str(tmp_path)])
    assert code == 0
    oracles = json.loads((tmp_path / "oracle.json").read_text())
    assert sorted(o["label"] for o in oracles) == ["Conv", "Sin"]
    assert len(list((tmp_path / "cells").iterdir())) == 2


def test_toy_train_translate_evaluate(tmp_path, tiny_config):
    data = tmp_path / "data" / "copy"
    assert main(["gen-toy", "--count", "24", "--max-len", "6", "--vocab", "8", "--prefix", str(data),
                 "--out", str(tmp_path / "toy")]) == 0
    src, tgt = f"{data}.src", f"{data}.tgt"
    assert (tmp_path / "data" / "copy.src").read_text() == (tmp_path / "data" / "copy.tgt").read_text()

    run = tmp_path / "run"
    assert main(["train", "--config", tiny_config, "--src", src, "--tgt", tgt, "--delta", "2",
                 "--max-steps", "6", "--out", str(run)]) == 0
    for name in ("checkpoint.bin", "train_log.tsv", "validation.json", "run.log", RESOLVED_CONFIG_NAME):
        assert (run / name).exists(), name
    assert (run / "train_log.tsv").read_text().startswith("step\tloss\tlr\twall")

    hyp = tmp_path / "hyp.txt"
    assert main(["translate", "--config", tiny_config, "--checkpoint", str(run / "checkpoint.bin"),
                 "--src", src, "--output", str(hyp), "--max-len", "10", "--out", str(tmp_path / "tr")]) == 0
    assert len(hyp.read_text(encoding="utf-8").splitlines()) == 24

    assert main(["evaluate", "--hyp", src, "--ref", tgt, "--out", str(tmp_path / "ev")]) == 0
    metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert metrics[0]["metric"] == "bleu" and metrics[0]["value"] == pytest.approx(100.0)
    assert metrics[2]["exact"] == "1/1"


def test_translate_missing_checkpoint(tmp_path):
    src = tmp_path / "in.txt"
    src.write_text("abc\n", encoding="utf-8")
    assert main(["translate", "--checkpoint", str(tmp_path / "nope.bin"), "--src", str(src),
                 "--out", str(tmp_path)]) == 2
    assert main(["translate", "--src", str(src), "--out", str(tmp_path)]) == 2


def test_evaluate_mismatched_files(tmp_path):
    (tmp_path / "h.txt").write_text("a\nb\n", encoding="utf-8")
    (tmp_path / "r.txt").write_text("a\n", encoding="utf-8")
    assert main(["evaluate", "--hyp", str(tmp_path / "h.txt"), "--ref", str(tmp_path / "r.txt"),
                 "--out", str(tmp_path)]) == 2


def test_evaluate_keeps_form_feeds_inside_lines(tmp_path):
    (tmp_path / "h.txt").write_bytes("a\x0cb\nc\u2028d\n".encode("utf-8"))
    (tmp_path / "r.txt").write_bytes("a\x0cb\nc\u2028d\n".encode("utf-8"))
    assert main(["evaluate", "--hyp", str(tmp_path / "h.txt"), "--ref", str(tmp_path / "r.txt"),
                 "--out", str(tmp_path / "ev")]) == 0
    metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert metrics[2]["exact"] == "2/2"


def test_train_without_corpus(tmp_path, tiny_config):
    assert main(["train", "--config", tiny_config, "--out", str(tmp_path)]) == 2


def test_markdown_table():
    import pandas as pd

    text = markdown_table(pd.DataFrame([{"variant": "r-GBST d=2", "ms_per_step": 1.5}]))
    assert text.splitlines() == ["| variant | ms_per_step |", "|---|---|", "| r-GBST d=2 | 1.500 |"]


def test_bench_writes_tables(tmp_path, tiny_config):
    code = main(["bench", "--config", tiny_config, "--out", str(tmp_path)])
    assert code == 0
    rows = (tmp_path / "bench.tsv").read_text().splitlines()
    assert rows[0].split("\t")[:4] == ["variant", "delta", "head", "ms_per_step"]
    assert len(rows) == 1 + 6
    assert (tmp_path / "bench.md").read_text(encoding="utf-8").startswith("| variant | delta |")
