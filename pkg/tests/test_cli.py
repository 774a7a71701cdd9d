import json

import pytest

from gliograd.cli import build_parser, main, resolve_seed
from gliograd.metrics import GradePrediction, predictions_to_json

TINY_ARGS = ["--stem-width", "4", "--widths", "4,8", "--pool-before", "0,1", "--fc-widths", "8"]


def tree(path):
    return {str(p.relative_to(path)): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.mark.parametrize("cmd", ["synth", "preprocess", "train-seg", "train-grade", "predict", "explain",
                                 "evaluate", "repro-border-study"])
def test_every_command_has_help(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0
    assert "--" in capsys.readouterr().out


def test_help_defaults_match_hyperparameters():
    sub = build_parser()._subparsers._group_actions[0].choices
    grade = sub["train-grade"].format_help()
    seg = sub["train-seg"].format_help()
    assert "0.0001" in grade and "0.4" in grade and "default: 8" in grade
    assert "5e-05" in seg and "1e-06" in seg and "0.05" in seg


def test_usage_errors_exit_1(capsys):
    code, _, err = run(["frobnicate"], capsys)
    assert code == 1 and json.loads(err)["exit_code"] == 1
    code, _, err = run(["explain", "--checkpoint", "a", "--volume", "b", "--out", "c", "--class", "1",
                        "--predicted-class"], capsys)
    assert code == 1 and "not allowed" in json.loads(err)["message"]
    code, _, _ = run(["train-grade", "--data", "x", "--out", "y", "--augment", "--no-augment"], capsys)
    assert code == 1


def test_data_errors_exit_2_with_one_json_line(tmp_path, capsys):
    code, _, err = run(["evaluate", "--predictions", str(tmp_path / "missing.json")], capsys)
    assert code == 2
    assert len(err.strip().splitlines()) == 1 and json.loads(err)["error"]
    code, _, err = run(["predict", "--checkpoint", str(tmp_path / "nope.ckpt"), "--data", str(tmp_path),
                        "--out", str(tmp_path / "p.json")], capsys)
    assert code == 2


def test_seed_env_fallback(monkeypatch):
    monkeypatch.setenv("GLIOGRAD_SEED", "17")
    assert resolve_seed(None) == 17 and resolve_seed(3) == 3
    monkeypatch.setenv("GLIOGRAD_SEED", "x")
    from gliograd.cli import UsageError

    with pytest.raises(UsageError):
        resolve_seed(None)
    monkeypatch.delenv("GLIOGRAD_SEED")
    assert resolve_seed(None) == 0


def test_synth_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--n", "4", "--seed", "7", "--extent", "40"]) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
    assert len(list((tmp_path / "a").iterdir())) == 4


def test_evaluate_perfect_predictions(tmp_path, capsys):
    preds = [GradePrediction("a", 0.9, "HGG", "HGG"), GradePrediction("b", 0.1, "LGG", "LGG")]
    (tmp_path / "p.json").write_text(predictions_to_json(preds))
    code, out, _ = run(["evaluate", "--predictions", str(tmp_path / "p.json"), "--out", str(tmp_path / "r.json")],
                       capsys)
    assert code == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["acc"] == 1.0 and rep["roc_auc"] == 1.0
    assert all(v == 1.0 for g in rep["grades"].values() for k, v in g.items() if k != "flags")
    assert "ROC-AUC" in out


def test_pipeline_and_explain(tmp_path, capsys):
    raw, roi = tmp_path / "raw", tmp_path / "roi"
    assert main(["synth", "--out", str(raw), "--n", "12", "--seed", "1", "--extent", "40"]) == 0
    assert main(["preprocess", "--data", str(raw), "--out", str(roi), "--extent", "16", "--margin", "3",
                 "--jobs", "2"]) == 0
    ckpt = tmp_path / "g.ckpt"
    assert main(["train-grade", "--data", str(roi), "--out", str(ckpt), "--epochs", "1", "--seed", "1",
                 "--min-per-grade", "3", "--no-augment", *TINY_ARGS]) == 0
    assert ckpt.exists() and (tmp_path / "g.jsonl").exists() and (tmp_path / "g.split.json").exists()
    preds = tmp_path / "p.json"
    assert main(["predict", "--checkpoint", str(ckpt), "--data", str(roi), "--out", str(preds),
                 "--split", str(tmp_path / "g.split.json")]) == 0
    rows = json.loads(preds.read_text())["predictions"]
    test_ids = json.loads((tmp_path / "g.split.json").read_text())["test"]
    assert [r["subject_id"] for r in rows] == sorted(test_ids)
    sid = test_ids[0]
    out = tmp_path / "explain"
    assert main(["explain", "--checkpoint", str(ckpt), "--volume", str(roi / sid), "--out", str(out),
                 "--taps", "res1,res2"]) == 0
    pngs = sorted(p.name for p in out.glob("*.png"))
    assert len(pngs) == 3 and (out / "gbp" / "gbp.raw").exists()
    capsys.readouterr()


def test_preprocess_predicted_needs_checkpoint(tmp_path, capsys):
    main(["synth", "--out", str(tmp_path / "raw"), "--n", "2", "--extent", "40"])
    code, _, err = run(["preprocess", "--data", str(tmp_path / "raw"), "--out", str(tmp_path / "roi"),
                        "--mask-source", "predicted"], capsys)
    assert code == 1 and "seg-checkpoint" in err
