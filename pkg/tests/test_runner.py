import csv
import json
import logging
import re
from pathlib import Path

import pytest

from csefsl import cli, ledger as L, nn, runner
from csefsl.errors import ConfigError
from csefsl.runner import ExperimentConfig

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = sorted((ROOT / "configs").glob("*.json"))


def small(tmp_path, **over):
    raw = {"dataset": {"kind": "blobs", "n": 300, "classes": 3, "dim": 4, "n_test": 90},
           "model": {"preset": "toy", "hidden": 8},
           "n_clients": 3, "batch_size": 20, "rounds": 3, "seeds": [0],
           "strategy": {"name": "CSE_FSL"}, "output_dir": str(tmp_path / "out")}
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(raw.get(k), dict):
            raw[k] = {**raw[k], **v}
        else:
            raw[k] = v
    return raw


def write_cfg(tmp_path, raw, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(raw))
    return p


def test_config_roundtrip(tmp_path):
    for path in CONFIGS:
        cfg = ExperimentConfig.load(path)
        again = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
        assert again == cfg and again.to_json() == cfg.to_json()


@pytest.mark.parametrize("patch,where", [
    ({"learning_rate": 0.1}, "learning_rate"),
    ({"strategy": {"name": "CSE_FSL", "hh": 2}}, "strategy.hh"),
    ({"dataset": {"kind": "blobs", "n": 300, "dimension": 4}}, "dataset.dimension"),
    ({"strategy": {"name": "FSL_AN", "h": 3}}, "h"),
    ({"n_clients": 0}, "n_clients"),
    ({"fraction": 1.5}, "fraction"),
])
def test_config_errors_name_field(tmp_path, patch, where, capsys):
    raw = small(tmp_path)
    raw.update(patch)
    with pytest.raises(ConfigError, match=re.escape(where)):
        ExperimentConfig.from_dict(raw)
    assert cli.main(["run", "--config", str(write_cfg(tmp_path, raw))]) == runner.EXIT_CONFIG
    assert where in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "nope.json")]) == runner.EXIT_CONFIG


def test_oc_clip_default_logged(tmp_path, caplog):
    cfg = ExperimentConfig.from_dict(small(tmp_path, strategy={"name": "FSL_OC"}))
    with caplog.at_level(logging.INFO):
        exp = runner.prepare(cfg, 0)
    assert exp.sim.strategy.clip == 1.0
    assert "clip_threshold" in caplog.text


def test_run_outputs_and_summary(tmp_path):
    raw = small(tmp_path, seeds=[0, 1], strategy={"name": "FSL_AN"})
    assert cli.main(["run", "--config", str(write_cfg(tmp_path, raw))]) == 0
    out = tmp_path / "out"
    for s in (0, 1):
        d = out / f"seed_{s}"
        rows = list(csv.DictReader(open(d / "metrics.csv")))
        assert len(rows) == 3 and tuple(rows[0]) == runner.METRICS_COLUMNS
        led = list(csv.DictReader(open(d / "ledger.csv")))
        assert tuple(led[0]) == L.LEDGER_COLUMNS
        up = sum(int(r["bytes"]) for r in led if r["direction"] == "up")
        assert up == int(rows[-1]["uplink_bytes"])
        summ = dict(line.split(": ", 1) for line in (d / "summary.txt").read_text().splitlines())
        exp = runner.prepare(ExperimentConfig.from_dict(raw), s)
        xc, ac, xs = exp.spec.param_counts()
        assert int(summ["storage_params"]) == L.storage_of("FSL_AN", 3, xc, ac, xs)
    assert "final_test_top1" in (out / "summary.txt").read_text()
    assert ExperimentConfig.load(out / "config.json") == ExperimentConfig.from_dict(raw)


def test_threads_match_serial(tmp_path):
    raw = small(tmp_path, seeds=[0, 1])
    raw["output_dir"] = str(tmp_path / "a")
    runner.run(ExperimentConfig.from_dict(raw), threads=1)
    raw["output_dir"] = str(tmp_path / "b")
    runner.run(ExperimentConfig.from_dict(raw), threads=2)
    for s in (0, 1):
        for f in ("metrics.csv", "ledger.csv"):
            assert (tmp_path / "a" / f"seed_{s}" / f).read_bytes() == \
                (tmp_path / "b" / f"seed_{s}" / f).read_bytes()


def test_env_overrides(tmp_path, monkeypatch):
    p = write_cfg(tmp_path, small(tmp_path))
    monkeypatch.setenv("CSEFSL_SEED", "7")
    monkeypatch.setenv("CSEFSL_OUT", str(tmp_path / "env_out"))
    assert cli.main(["run", "--config", str(p)]) == 0
    assert (tmp_path / "env_out" / "seed_7" / "metrics.csv").exists()
    assert cli.main(["run", "--config", str(p), "--seed", "3", "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "seed_3" / "metrics.csv").exists()
    monkeypatch.setenv("CSEFSL_SEED", "x")
    assert cli.main(["run", "--config", str(p)]) == runner.EXIT_CONFIG


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit(tmp_path):
    p = write_cfg(tmp_path, small(tmp_path, eta0=1e300))
    assert cli.main(["run", "--config", str(p)]) == runner.EXIT_NUMERIC


def test_gradcheck_cli(capsys):
    assert cli.main(["gradcheck"]) == 0
    text = capsys.readouterr().out
    for kind in ("dense", "relu", "flatten", "conv2d"):
        assert kind in text


def test_gradcheck_fault_injection(monkeypatch):
    real = nn.backward

    def broken(stack, params, trace, upstream):
        grads, dx = real(stack, params, trace, upstream)
        return {k: -g if k.endswith("weight") else g for k, g in grads.items()}, dx
    monkeypatch.setattr(nn, "backward", broken)
    assert cli.main(["gradcheck"]) == runner.EXIT_ORACLE


def test_compare(tmp_path):
    a = write_cfg(tmp_path, small(tmp_path), "a.json")
    b = write_cfg(tmp_path, small(tmp_path, strategy={"name": "CSE_FSL", "h": 5}), "b.json")
    out = tmp_path / "cmp"
    assert cli.main(["compare", str(a), str(b), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "compare.csv")))
    assert tuple(rows[0]) == runner.COMPARE_COLUMNS and len(rows) == 6
    last = {r["h"]: int(r["comm_rounds"]) for r in rows if r["round"] == "2"}
    assert last["5"] < last["1"]
    c = write_cfg(tmp_path, small(tmp_path, model={"preset": "toy", "hidden": 4}), "c.json")
    assert cli.main(["compare", str(a), str(c), "--out", str(out)]) == runner.EXIT_CONFIG
    assert cli.main(["compare", str(a), "--out", str(out)]) == runner.EXIT_CONFIG


@pytest.mark.slow
@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.stem)
def test_bundled_configs_run_and_repeat(tmp_path, path):
    raw = json.loads(path.read_text())
    raw["rounds"] = 3
    raw["seeds"] = raw["seeds"][:1]
    p = write_cfg(tmp_path, raw)
    outs = []
    for tag in ("a", "b"):
        assert cli.main(["run", "--config", str(p), "--out", str(tmp_path / tag)]) == 0
        d = tmp_path / tag / f"seed_{raw['seeds'][0]}"
        outs.append(((d / "metrics.csv").read_bytes(), (d / "ledger.csv").read_bytes()))
    assert outs[0] == outs[1]


def test_readme_columns_match_headers():
    text = (ROOT / "README.md").read_text()
    for cols in (runner.METRICS_COLUMNS, L.LEDGER_COLUMNS, runner.COMPARE_COLUMNS):
        assert ",".join(cols) in text
