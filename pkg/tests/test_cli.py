import csv
import json

import pytest

from betsearch.cli import main
from betsearch.embedding import import_sparse

SMALL = ["data.num_users=40", "data.num_items=60", "data.interactions=600", "search.d_max=8",
         "search.c=0.7", "search.T=3", "search.m=3", "search.retrain_top_k=2",
         "train.max_epochs=4", "train.batch_size=128", "train.eval_every=2",
         "train.finetune_epochs=1"]


def _sets(extra=()):
    out = []
    for kv in list(SMALL) + list(extra):
        out += ["--set", kv]
    return out


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    assert main(["pretrain", "--out", str(out), "--plot"] + _sets()) == 0
    return out


def test_pretrain_outputs(pretrained):
    report = json.loads((pretrained / "report.json").read_text())
    assert report["denominator"] > 0
    assert (pretrained / "config.json").exists()
    assert (pretrained / "model" / "table.npy").exists()
    assert (pretrained / "pretrain.svg").read_text().lstrip().startswith("<?xml")
    lines = (pretrained / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == report["epochs_run"]


def test_pretrain_deterministic(tmp_path, pretrained):
    assert main(["pretrain", "--out", str(tmp_path)] + _sets()) == 0
    a = (pretrained / "model" / "table.npy").read_bytes()
    assert (tmp_path / "model" / "table.npy").read_bytes() == a


def test_pretrained_beats_untrained(tmp_path, pretrained, capsys):
    report = json.loads((pretrained / "report.json").read_text())
    assert main(["pretrain", "--out", str(tmp_path)] + _sets(["train.max_epochs=1",
                                                             "train.initial_lr=1e-9"])) == 0
    untrained = json.loads((tmp_path / "report.json").read_text())
    assert report["val"]["ensemble"] > untrained["val"]["ensemble"]


def test_search_outputs(tmp_path, pretrained, capsys):
    out = tmp_path / "s"
    export = tmp_path / "final.bets"
    assert main(["search", "--model", str(pretrained), "--out", str(out), "--export", str(export),
                 "--plot"]) == 0
    text = capsys.readouterr().out
    assert "parameters retained" in text and "sparsity" in text
    report = json.loads((out / "report.json").read_text())
    assert report["finetunes"] == 3
    assert report["retained"] <= report["budget"]
    assert len(json.loads((out / "population.json").read_text())) == 3
    assert len((out / "iterations.jsonl").read_text().splitlines()) == 3
    assert (out / "predictor.betp").read_bytes()[:4] == b"BETP"
    assert (out / "search.svg").exists() and (out / "config.json").exists()
    table = import_sparse(export)
    assert table.retained == report["retained"]


def test_search_deterministic(tmp_path, pretrained):
    for name in ("a", "b"):
        assert main(["search", "--model", str(pretrained), "--out", str(tmp_path / name)]) == 0
    for f in ("population.json", "table.bets"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


@pytest.mark.parametrize("kind", ["su", "sr"])
def test_baseline(tmp_path, kind, capsys):
    assert main(["baseline", kind, "--out", str(tmp_path)] + _sets()) == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["kind"] == kind
    if kind == "su":
        assert len(out["sizes"]) == 1
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["retained"] <= report["budget"]
    assert (tmp_path / "config.json").exists()


def test_evaluate_and_export(tmp_path, pretrained, capsys):
    assert main(["evaluate", "--model", str(pretrained), "--split", "val"]) == 0
    res = json.loads(capsys.readouterr().out)
    report = json.loads((pretrained / "report.json").read_text())
    assert res["ensemble"] == pytest.approx(report["denominator"])
    su = tmp_path / "su"
    assert main(["baseline", "su", "--out", str(su)] + _sets()) == 0
    bets = tmp_path / "x.bets"
    assert main(["export", "--model", str(pretrained), "--action", str(su / "action.json"),
                 "--out", str(bets)]) == 0
    table = import_sparse(bets)
    assert len(set(table.row_sizes.tolist())) == 1
    capsys.readouterr()
    assert main(["evaluate", "--model", str(pretrained), "--table", str(bets)]) == 0
    assert 0 <= json.loads(capsys.readouterr().out)["ensemble"] <= 1


def test_export_without_action_fails(tmp_path, pretrained, capsys):
    assert main(["export", "--model", str(pretrained), "--out", str(tmp_path / "x")]) == 2
    assert "action" in capsys.readouterr().err


def test_sweep(tmp_path, pretrained):
    out = tmp_path / "sw"
    assert main(["sweep", "--model", str(pretrained), "--axis", "T", "--values", "1,2",
                 "--out", str(out), "--plot"]) == 0
    rows = list(csv.DictReader((out / "sweep.csv").open()))
    assert [r["value"] for r in rows] == ["1", "2"]
    assert (out / "sweep.svg").exists()


def test_sweep_unknown_axis(tmp_path, pretrained):
    with pytest.raises(SystemExit) as exc:
        main(["sweep", "--model", str(pretrained), "--axis", "q", "--values", "1",
              "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_infeasible_budget(tmp_path, capsys):
    code = main(["baseline", "su", "--out", str(tmp_path)] + _sets(["search.c=0.95"]))
    assert code == 2
    err = capsys.readouterr().err
    assert "B=" in err and "users+items" in err


def test_bad_config_key(tmp_path, capsys):
    assert main(["pretrain", "--out", str(tmp_path), "--set", "train.nope=1"]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_numeric_failure_exit_code(tmp_path):
    code = main(["pretrain", "--out", str(tmp_path)] + _sets(["train.initial_lr=1e300",
                                                             "train.init_scale=1e200"]))
    assert code == 3


def test_env_seed_override(tmp_path, monkeypatch):
    monkeypatch.setenv("BET_SEED", "17")
    assert main(["synth", "--out", str(tmp_path / "d"), "--set", "seed=3"] + _sets()) == 0
    header = json.loads((tmp_path / "d" / "header.json").read_text())
    assert header["seed"] == 17


def test_config_file(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data.num_users": 30, "data.num_items": 50,
                               "data.interactions": 400}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    assert json.loads((tmp_path / "d" / "header.json").read_text())["num_users"] == 30


def test_high_sparsity_smoke(tmp_path, capsys):
    extra = ["search.d_max=32", "search.c=0.95"]
    pre = tmp_path / "pre"
    assert main(["pretrain", "--out", str(pre)] + _sets(extra)) == 0
    assert main(["search", "--model", str(pre), "--out", str(tmp_path / "s")]) == 0
    text = capsys.readouterr().out
    report = json.loads((tmp_path / "s" / "report.json").read_text())
    assert report["sparsity"] >= 0.95
    assert f"{report['retained']} of {report['budget'] * 20} parameters retained" in text


def test_baseline_su_equal_split(tmp_path):
    sets = _sets(["data.num_users=10", "data.num_items=10", "data.interactions=40",
                  "search.d_max=100", "search.c=0.9"])
    assert main(["baseline", "su", "--out", str(tmp_path)] + sets) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    action = json.loads((tmp_path / "action.json").read_text())
    assert report["budget"] == 200
    assert set(action["sizes"]) == {10} and len(action["sizes"]) == 20


def test_sweep_m_rows(tmp_path, pretrained):
    out = tmp_path / "sw"
    assert main(["sweep", "--model", str(pretrained), "--axis", "m", "--values", "20,100",
                 "--set", "search.T=1", "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "sweep.csv").open()))
    assert [int(r["value"]) for r in rows] == [20, 100]


@pytest.mark.slow
def test_sweep_t_trend(tmp_path, pretrained):
    out = tmp_path / "sw"
    assert main(["sweep", "--model", str(pretrained), "--axis", "T", "--values", "5,20",
                 "--seeds", "5", "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "sweep.csv").open()))
    by_seed = {}
    for r in rows:
        by_seed.setdefault(r["seed"], {})[int(r["value"])] = float(r["val_ensemble"])
    ok = sum(v[20] >= v[5] - 0.01 for v in by_seed.values())
    assert len(by_seed) == 5 and ok >= 3
