import json

import pytest

from blrmoe import checkpoint as ckpt
from blrmoe.cli import main
from blrmoe.synthlang import load_corpus, save_corpus

TINY = """\
[model]
num_layers = 2
num_shared = 1
d_model = 8
num_heads = 2
d_ffn = 12
feature_dim = 6
moe_modules = o,v,f
router_kind = tdnn
tdnn_channels = 6

[train]
epochs = 2
batch_size = 8
warmup_steps = 4

[corpus]
utterances_per_lang = 10
lid_utterances_per_lang = 4
"""


@pytest.fixture()
def cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_param_count_vanilla(capsys, tmp_path):
    path = tmp_path / "v.cfg"
    path.write_text("[model]\nmoe_modules =\n")
    code, out, _ = run(capsys, "param-count", "--config", path)
    assert code == 0
    row = out.splitlines()[1].split()
    assert row[1] == row[2]


def test_invalid_config_exits_1_with_location(capsys, tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("[model]\nd_model = 8\nlayers = 3\n")
    code, _, err = run(capsys, "train", "--config", path)
    assert code == 1
    assert "model.layers" in err and "line 3" in err
    code, _, _ = run(capsys, "train", "--config", tmp_path / "missing.cfg")
    assert code == 1
    code, _, _ = run(capsys, "frobnicate")
    assert code == 1


def test_train_is_reproducible(capsys, cfg, tmp_path):
    outs = []
    for name in ("a", "b"):
        code, _, _ = run(capsys, "train", "--config", cfg, "--out", tmp_path / name)
        assert code == 0
        outs.append(tmp_path / name)
    a, b = outs
    assert (a / "metrics.tsv").read_bytes() == (b / "metrics.tsv").read_bytes()
    assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()
    assert (a / "config.cfg").read_text() == (b / "config.cfg").read_text()
    assert (a / "training_curve.png").stat().st_size > 0
    assert len((a / "metrics.tsv").read_text().splitlines()) == 3


def test_eval_finetune_and_pruning(capsys, cfg, tmp_path):
    assert run(capsys, "gen-corpus", "--config", cfg, "--out", tmp_path / "data")[0] == 0
    assert run(capsys, "train", "--config", cfg, "--out", tmp_path / "run")[0] == 0
    model = tmp_path / "run" / "model.ckpt"

    code, out, _ = run(capsys, "eval", model, tmp_path / "data" / "test_shifted",
                       "--prune-keep", "all", "--out", tmp_path / "ev")
    assert code == 0 and "TER %" in out
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert sum(report["excluded"].values()) == 0
    assert (tmp_path / "ev" / "report.png").exists()

    # single-language keep-set on that language's utterances routes perfectly
    test = load_corpus(tmp_path / "data" / "test_shifted")
    save_corpus(test.by_language(3), tmp_path / "ar_only")
    code, _, _ = run(capsys, "eval", model, tmp_path / "ar_only", "--prune-keep", "ar", "--out", tmp_path / "ev_ar")
    assert code == 0
    rep = json.loads((tmp_path / "ev_ar" / "report.json").read_text())
    assert rep["router_acc"]["ar"] == 1.0

    code, _, err = run(capsys, "eval", model, tmp_path / "ar_only", "--prune-keep", "fr")
    assert code == 1 and "fr" in err

    code, out, _ = run(capsys, "finetune-router", model, tmp_path / "data" / "lid_shifted",
                       "--config", cfg, "--epochs", "0", "--out", tmp_path / "ft0")
    assert code == 0 and "frozen parameter hash" in out
    before, after = ckpt.load(model), ckpt.load(tmp_path / "ft0" / "model.ckpt")
    assert ckpt.to_bytes(before.model) == ckpt.to_bytes(after.model)
    assert before.metadata != after.metadata

    code, out, _ = run(capsys, "finetune-router", model, tmp_path / "data" / "lid_shifted",
                       "--config", cfg, "--out", tmp_path / "ft")
    lines = dict(l.split("\t", 1) for l in out.splitlines())
    assert code == 0 and lines["frozen parameter hash"] == lines["after fine-tuning"]


def test_finetune_language_mismatch(capsys, cfg, tmp_path):
    run(capsys, "train", "--config", cfg, "--epochs", "0", "--out", tmp_path / "run")
    run(capsys, "gen-corpus", "--config", cfg, "--out", tmp_path / "data")
    lid = load_corpus(tmp_path / "data" / "lid_shifted")
    from dataclasses import replace
    save_corpus(replace(lid, languages=("zh", "en", "ja", "fr")), tmp_path / "wrong")
    code, _, err = run(capsys, "finetune-router", tmp_path / "run" / "model.ckpt", tmp_path / "wrong",
                       "--config", cfg, "--out", tmp_path / "ft")
    assert code == 1 and "languages" in err


def test_verify_passes_and_is_repeatable(capsys):
    first = run(capsys, "verify", "--only", "ctc_oracle,single_expert,routing_sparsity,pruning")
    second = run(capsys, "verify", "--only", "ctc_oracle,single_expert,routing_sparsity,pruning")
    assert first[0] == 0 and first[1] == second[1]
    assert "4/4 checks passed" in first[1]


def test_verify_catches_injected_fault(capsys):
    code, out, _ = run(capsys, "verify", "--only", "gradients", "--inject-fault", "matmul")
    assert code == 2 and out.startswith("FAIL\tgradients")
    code, _, _ = run(capsys, "verify", "--only", "nonsense")
    assert code == 1


def test_ablate_writes_tables_and_figures(capsys, cfg, tmp_path):
    code, out, _ = run(capsys, "ablate", "--config", cfg, "--out", tmp_path / "abl")
    assert code == 0
    assert "o,v,k,q,f" in out and "ZH,EN,JA" in out
    for name in ("ablation.tsv", "pruning.tsv", "tables.txt", "ablation.png", "pruning.png", "config.cfg"):
        assert (tmp_path / "abl" / name).exists()
