import json
import math

import pytest

from gskring import cli
from gskring.experiments import (
    COLUMNS,
    ExperimentConfig,
    emit_outputs,
    load_config,
    read_table,
    run_cell,
    run_constellation_study,
    run_experiment,
)

SMALL = dict(snr_db=(20.0,), m=(2, 4), blocks=20000, workers=1)


def test_config_validation():
    for bad in (dict(m=(3,)), dict(beta=0), dict(blocks=0), dict(design_pair="14"), dict(protocol="x")):
        with pytest.raises(ValueError):
            ExperimentConfig(**bad)


def test_config_aliases_and_unknown_keys():
    cfg = ExperimentConfig.from_mapping({"excursion-max": 3, "L": 50, "snr": [10]})
    assert cfg.e_max == 3 and cfg.blocks == 50 and cfg.snr_db == (10.0,)
    with pytest.raises(ValueError):
        ExperimentConfig.from_mapping({"nonsense": 1})


@pytest.mark.parametrize("suffix", [".toml", ".json"])
def test_load_config(tmp_path, suffix):
    p = tmp_path / f"cfg{suffix}"
    if suffix == ".toml":
        p.write_text('protocol = "asqgsk"\nsnr_db = [15.0, 25.0]\nm = [4]\nb = 2\n')
    else:
        p.write_text(json.dumps({"protocol": "asqgsk", "snr_db": [15.0, 25.0], "m": [4], "b": 2}))
    cfg = load_config(p)
    assert cfg.snr_db == (15.0, 25.0) and cfg.m == (4,) and cfg.b == 2


@pytest.mark.parametrize("snr", [60.0, 90.0])
def test_high_snr_limit(snr):
    cfg = ExperimentConfig(snr_db=(snr,), m=(4,), blocks=20000)
    row = run_cell(cfg, snr, 4)
    assert row["feasible"] and row["e"] == 1
    assert row["group_key_rate"] == pytest.approx(cfg.b * row["survival_rate"], abs=0.01)
    # boundary disagreements scale with sigma; at 60 dB a few per thousand remain
    assert row["group_mismatch"] <= (cfg.beta if snr < 90 else 0.0)


def test_infeasible_cell_is_a_row():
    cfg = ExperimentConfig(snr_db=(10.0,), m=(4,), b=2, blocks=5000)
    row = run_cell(cfg, 10.0, 4)
    assert row["feasible"] is False
    assert row["group_key_rate"] == 0.0


def test_group_rate_below_pairwise_and_entropy():
    rows = run_experiment(ExperimentConfig(**SMALL))
    for r in rows:
        assert r["group_key_rate"] <= r["pair_key_rate"]
        if r["n_group"] >= 5000:
            assert r["key_entropy"] >= r["b"] - 0.05


def test_emit_outputs_roundtrip_and_schema(tmp_path):
    cfg = ExperimentConfig(**SMALL)
    rows = run_experiment(cfg)
    paths = emit_outputs(rows, tmp_path, cfg)
    back = read_table(paths["csv"])
    assert len(back) == len(rows)
    for a, b in zip(rows, back):
        for c in COLUMNS:
            if isinstance(a[c], float) and math.isnan(a[c]):
                assert math.isnan(b[c])
            else:
                assert a[c] == b[c], c
    doc = json.loads(paths["json"].read_text())
    assert doc["columns"] == list(COLUMNS)
    assert "workers" not in doc["config"]
    text = paths["csv"].read_text().splitlines()
    assert text[0].startswith("# config ") and text[1].startswith("# quantizers ")
    assert text[2].split(",") == list(COLUMNS)
    dat = paths["dat"].read_text().splitlines()
    assert all(len(line.split()) == len(COLUMNS) for line in dat if not line.startswith("#"))


def test_emit_empty_table(tmp_path):
    paths = emit_outputs([], tmp_path, ExperimentConfig())
    lines = paths["csv"].read_text().splitlines()
    assert len(lines) == 3 and read_table(paths["csv"]) == []


def test_emit_outputs_reports_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match=str(blocker)):
        emit_outputs([], blocker / "sub", ExperimentConfig())


def test_constellation_study_deterministic():
    cfg = ExperimentConfig(**SMALL)
    assert run_constellation_study(cfg) == run_constellation_study(cfg)


# -------------------------------------------------------------------- CLI


def test_cli_single_cell_commands(tmp_path):
    base = ["--blocks", "20000", "--snr-db", "25", "--m", "4"]
    assert cli.main(["simulate", *base, "--out", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "trace.csv").exists()
    assert cli.main(["consensus", *base, "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "key_node3.hex").exists()
    assert cli.main(["leakage", *base, "--out", str(tmp_path / "l")]) == 0
    rep = json.loads((tmp_path / "l" / "leakage.json").read_text())
    assert rep["MI"] <= rep["threshold"]
    assert cli.main(["design", *base, "--out", str(tmp_path / "d")]) == 0


def test_cli_infeasible_exit_code(tmp_path):
    args = ["--blocks", "3000", "--snr-db", "10", "--m", "4", "--b", "2", "--out", str(tmp_path)]
    assert cli.main(["design", *args]) == 2
    assert cli.main(["sweep", *args]) == 2


def test_cli_error_exit_code(tmp_path, capsys):
    assert cli.main(["sweep", "--m", "3", "--out", str(tmp_path)]) == 1
    assert "even" in capsys.readouterr().err
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"snr_db": [10, 20], "m": [2]}))
    assert cli.main(["design", "--config", str(grid), "--out", str(tmp_path)]) == 1


def test_cli_flags_override_config(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("snr_db = [20.0]\nm = [2]\nblocks = 20000\nseed = 4\n")
    out = tmp_path / "o"
    assert cli.main(["sweep", "--config", str(cfg), "--seed", "5", "--workers", "1", "--out", str(out)]) == 0
    doc = json.loads((out / "metrics.json").read_text())
    assert doc["config"]["seed"] == 5 and doc["config"]["blocks"] == 20000


def test_cli_study(tmp_path):
    args = ["study", "design-pair", "--snr-db", "25", "--m", "2", "--blocks", "20000", "--out", str(tmp_path)]
    assert cli.main(args) == 0
    rows = read_table(tmp_path / "design_pair.csv")
    assert [r["design_pair"] for r in rows] == ["12", "13", "23"]
