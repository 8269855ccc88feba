import json

import pytest

from keyward import cli
from keyward.errors import ConfigError
from keyward.keys import load_keys


def _run(tmp_path, *argv):
    return cli.main(list(argv))


def test_overrides_parse_json_and_dot_paths():
    out = cli.apply_overrides({"a": 1}, ["a=2", "b.c=true", "name=plain", "xs=[1,2]"])
    assert out == {"a": 2, "b": {"c": True}, "name": "plain", "xs": [1, 2]}
    with pytest.raises(ConfigError):
        cli.apply_overrides({}, ["novalue"])


def test_bad_json_reports_line(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text('{\n  "n_epochs": 3,\n  oops\n}')
    assert cli.main(["collab", "--config", str(p)]) == cli.EXIT_CONFIG
    assert f"{p}:3:" in capsys.readouterr().err


def test_unknown_field_exit_code(tmp_path, capsys):
    assert cli.main(["collab", "--set", "nope=1", "--set", f"out_dir={tmp_path}"]) == 2
    assert "nope" in capsys.readouterr().err


def test_subcommand_mismatch(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"experiment": "attack"}))
    assert cli.main(["collab", "--config", str(p)]) == 2


def test_runtime_failure_exit_code(tmp_path, capsys):
    code = cli.main(["loss-compare", "--set", f"out_dir={tmp_path}", "--set", "dataset=mnist",
                     "--set", f"data_dir={tmp_path}/missing"])
    assert code == cli.EXIT_RUNTIME
    assert "FileNotFoundError" in capsys.readouterr().err


def test_collab_outputs(tmp_path, monkeypatch):
    monkeypatch.setenv("KEYWARD_OUT", str(tmp_path / "env"))
    assert cli.main(["collab", "--set", "n_epochs=3", "--set", "per_class=30"]) == 0
    out = tmp_path / "env"
    summary = json.loads((out / "summary.json").read_text())
    assert {"experiment", "seed", "headline_name", "headline_value", "runtime_s"} <= set(summary)
    assert summary["experiment"] == "collab" and summary["headline_name"] == "mpa"
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["n_epochs"] == 3 and resolved["out_dir"] == str(out)
    assert (out / "metrics.csv").read_text().startswith("epoch,participant_id,role")
    keys = load_keys(out / "keys" / "p0.keys")
    assert {k.owner for k in keys} == {"p0"}


def test_attack_dumps_samples(tmp_path):
    assert cli.main(["attack", "--set", f"out_dir={tmp_path}", "--set", "n_epochs=4", "--set", "dump_every=2",
                     "--set", "n_dump=2"]) == 0
    names = sorted(p.name for p in (tmp_path / "samples").iterdir())
    assert names[0] == "attack_exact_key_epoch2_sample0.csv" and len(names) == 4
    assert json.loads((tmp_path / "summary.json").read_text())["headline_name"] == "oracle_score"


def test_small_subcommands(tmp_path):
    assert cli.main(["softmax-oracle", "--set", f"out_dir={tmp_path}/s", "--set", "mc_samples=2000"]) == 0
    assert cli.main(["key-stats", "--set", f"out_dir={tmp_path}/k", "--set", "d_key_ladder=[2,8]",
                     "--set", "n_repeats=3"]) == 0
    rows = (tmp_path / "k" / "key_stats.csv").read_text().splitlines()
    assert rows[0].startswith("d_key,distribution") and len(rows) == 5
    assert cli.main(["shared-class", "--set", f"out_dir={tmp_path}/c", "--set", "n_trials=3",
                     "--set", "shared_training=false", "--set", "d_key=64"]) == 0
    assert cli.main(["grad-check", "--set", f"out_dir={tmp_path}/g", "--set", "n_instances=2"]) == 0
