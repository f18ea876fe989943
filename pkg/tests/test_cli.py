import hashlib

import numpy as np
import pytest

from aespipe.cli import run
from aespipe.dataio import load_model, model_to_bytes, read_manifest, read_predictions, write_predictions
from aespipe.predictor import init_predictor

TINY = ["--hidden", "4", "--groups", "2", "--no-figures"]


def _tree_digest(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def kan_model(small_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("kan")
    assert run(["train-kan", "--manifest", str(small_corpus), "--out", str(out), "--epochs", "2",
                "--lr", "3e-3", *TINY]) == 0
    return out / "model.aesm"


def test_no_subcommand_is_usage_error(capsys):
    assert run([]) == 1


def test_unknown_subcommand(capsys):
    assert run(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_required_flag(capsys):
    assert run(["train-kan", "--out", "x"]) == 1


def test_missing_manifest_is_data_error(tmp_path, capsys):
    code = run(["train-kan", "--manifest", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o")])
    assert code == 2


def test_bad_config_key(tmp_path, small_corpus):
    cfg = tmp_path / "c.txt"
    cfg.write_text("bogus=1\n")
    assert run(["predict", "--config", str(cfg), "--model", "m", "--manifest", "x",
                "--out", str(tmp_path)]) == 1


def test_evaluate_perfect_predictions(small_corpus, tmp_path, capsys):
    recs = [r for r in read_manifest(small_corpus) if r.split == "eval"]
    pred = tmp_path / "p.csv"
    write_predictions({r.utt_id: r.labels for r in recs}, pred)
    assert run(["evaluate", "--pred", str(pred), "--manifest", str(small_corpus),
                "--name", "truth"]) == 0
    lines = capsys.readouterr().out.strip().split("\n")
    assert lines[0] == "model,level,metric,PQ,PC,CE,CU,overall"
    for line in lines[1:]:
        _, level, metric, *vals = line.split(",")
        want = "0.000000" if metric == "mse" else "1.000000"
        assert vals == [want] * 5, line


def test_evaluate_writes_report_and_figure(small_corpus, tmp_path, capsys):
    recs = [r for r in read_manifest(small_corpus) if r.split == "dev"]
    pred = tmp_path / "p.csv"
    write_predictions({r.utt_id: np.full(4, 5.0) for r in recs}, pred)
    out = tmp_path / "rep"
    assert run(["evaluate", "--pred", str(pred), "--manifest", str(small_corpus),
                "--split", "dev", "--out", str(out)]) == 0
    assert (out / "report.csv").read_text() == capsys.readouterr().out
    assert (out / "report.png").stat().st_size > 0
    assert "split=dev" in (out / "config.txt").read_text()


def test_evaluate_id_mismatch(small_corpus, tmp_path):
    pred = tmp_path / "p.csv"
    write_predictions({"ghost": np.full(4, 5.0)}, pred)
    assert run(["evaluate", "--pred", str(pred), "--manifest", str(small_corpus),
                "--split", "eval"]) == 2


def test_train_kan_zero_epochs_equals_init(small_corpus, tmp_path):
    out = tmp_path / "k"
    assert run(["train-kan", "--manifest", str(small_corpus), "--out", str(out),
                "--epochs", "0", "--seed", "3", *TINY]) == 0
    init = init_predictor(3, 8, hidden=(4,), groups=2, order=(5, 4), seed=3)
    assert (out / "model.aesm").read_bytes() == model_to_bytes(init)
    assert (out / "history.csv").read_text() == "epoch,train_loss,dev_loss\n"


def test_config_file_and_flag_precedence(small_corpus, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text(f"manifest={small_corpus}\nepochs=0\nseed=5\nhidden=4\ngroups=2\nno_figures=true\n")
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["train-kan", "--config", str(cfg), "--out", str(a)]) == 0
    assert run(["train-kan", "--config", str(cfg), "--out", str(b), "--seed", "6"]) == 0
    conf_a = (a / "config.txt").read_text()
    assert "seed=5" in conf_a and "epochs=0" in conf_a and "hidden=4" in conf_a
    assert "seed=6" in (b / "config.txt").read_text()
    want = model_to_bytes(init_predictor(3, 8, hidden=(4,), groups=2, seed=6))
    assert (b / "model.aesm").read_bytes() == want


def test_train_kan_reproducible(small_corpus, tmp_path, kan_model):
    out = tmp_path / "again"
    assert run(["train-kan", "--manifest", str(small_corpus), "--out", str(out), "--epochs", "2",
                "--lr", "3e-3", *TINY]) == 0
    assert (out / "model.aesm").read_bytes() == kan_model.read_bytes()
    assert (out / "history.csv").read_bytes() == (kan_model.parent / "history.csv").read_bytes()


def test_pipeline_does_not_mutate_inputs(small_corpus, tmp_path, kan_model):
    corpus = small_corpus.parent
    before = _tree_digest(corpus)
    model_before = kan_model.read_bytes()
    assert run(["pseudo-label", "--manifest", str(small_corpus), "--teacher", str(kan_model),
                "--out", str(tmp_path / "pl")]) == 0
    assert run(["predict", "--model", str(kan_model), "--manifest", str(small_corpus),
                "--out", str(tmp_path / "pr")]) == 0
    assert run(["train-gbt", "--manifest", str(small_corpus), "--out", str(tmp_path / "g"),
                "--trials", "0", "--folds", "3", "--rounds", "10"]) == 0
    assert run(["fit-ensemble", "--kan", str(kan_model), "--fusion", str(tmp_path / "g" / "fusion.aesm"),
                "--manifest", str(small_corpus), "--out", str(tmp_path / "e"), "--step", "0.25"]) == 0
    assert _tree_digest(corpus) == before
    assert kan_model.read_bytes() == model_before


def test_pseudo_label_manifest(small_corpus, tmp_path, kan_model):
    out = tmp_path / "pl"
    assert run(["pseudo-label", "--manifest", str(small_corpus), "--teacher", str(kan_model),
                "--out", str(out)]) == 0
    new = read_manifest(out / "manifest.jsonl")
    old = read_manifest(small_corpus)
    assert [r.utt_id for r in new] == [r.utt_id for r in old]
    relabeled = [n for n, o in zip(new, old) if o.labels is None]
    assert relabeled and all(r.pseudo and r.labels is not None for r in relabeled)
    for r in relabeled:
        assert all(1.0 <= v <= 10.0 for v in r.labels.as_array())
    # relocated paths still resolve
    assert run(["predict", "--model", str(kan_model), "--manifest", str(out / "manifest.jsonl"),
                "--out", str(tmp_path / "pr")]) == 0


def test_ensemble_predict_evaluate(small_corpus, tmp_path, kan_model, capsys):
    g, e, pr = tmp_path / "g", tmp_path / "e", tmp_path / "pr"
    assert run(["train-gbt", "--manifest", str(small_corpus), "--out", str(g), "--trials", "2",
                "--folds", "3", "--space", "rounds=5:20", "--space", "max_depth=2|3"]) == 0
    assert (g / "cv.csv").read_text().count("final") == 4
    assert run(["fit-ensemble", "--kan", str(kan_model), "--fusion", str(g / "fusion.aesm"),
                "--manifest", str(small_corpus), "--out", str(e)]) == 0
    weights = (e / "weights.csv").read_text().strip().split("\n")
    assert len(weights) == 5
    for row in weights[1:]:
        w = [float(v) for v in row.split(",")[1:3]]
        assert abs(sum(w) - 1.0) < 1e-12
    assert run(["predict", "--model", str(e / "ensemble.aesm"), "--manifest", str(small_corpus),
                "--out", str(pr)]) == 0
    preds = read_predictions(pr / "predictions.csv")
    assert len(preds) == 40
    capsys.readouterr()
    assert run(["evaluate", "--pred", str(pr / "predictions.csv"), "--manifest", str(small_corpus)]) == 0
    report = capsys.readouterr().out.strip().split("\n")
    assert len(report) == 9 and all("nan" not in line for line in report)
    assert isinstance(load_model(e / "ensemble.aesm").members[1].feature_names, list)


def test_bad_space_is_usage_error(small_corpus, tmp_path):
    assert run(["train-gbt", "--manifest", str(small_corpus), "--out", str(tmp_path),
                "--space", "depth=1:2"]) == 1


def test_fit_ensemble_wrong_model_kind(small_corpus, tmp_path, kan_model):
    assert run(["fit-ensemble", "--kan", str(kan_model), "--fusion", str(kan_model),
                "--manifest", str(small_corpus), "--out", str(tmp_path)]) == 1


def test_gen_synth_cli(tmp_path, capsys):
    out = tmp_path / "s"
    assert run(["gen-synth", "--out", str(out), "--n-train", "5", "--n-dev", "2", "--n-eval", "2",
                "--n-systems", "2", "--layers", "2", "--frames", "3", "--dims", "4"]) == 0
    assert capsys.readouterr().out.strip().endswith("manifest.jsonl")
    assert len(read_manifest(out / "manifest.jsonl")) == 14
    assert run(["gen-synth", "--out", str(out), "--n-train", "0"]) == 1
