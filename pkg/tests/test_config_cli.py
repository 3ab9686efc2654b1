import json
from pathlib import Path

import pytest

from edgedraft.cli import main
from edgedraft.config import apply_overrides, config_to_spec, load_config
from edgedraft.errors import ConfigError


def test_defaults_load_without_file():
    cfg = load_config(None)
    spec = config_to_spec(cfg)
    assert spec.mode == "sled"
    assert spec.num_devices == 16
    assert spec.gamma == 4


def test_unknown_key_names_the_key(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[server]\nbatch_sise = 4\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="server.batch_sise"):
        load_config(path)


def test_unknown_section_rejected(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[serverz]\nbatch_size = 4\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="serverz"):
        load_config(path)


def test_devices_group_and_overrides(tmp_path):
    path = tmp_path / "ok.toml"
    path.write_text(
        "[[devices]]\ncount = 3\nhardware = 'jetson-orin-nano'\ngamma = 2\n",
        encoding="utf-8")
    cfg = load_config(path)
    spec = config_to_spec(cfg)
    assert spec.num_devices == 3
    assert spec.hardware == "jetson-orin-nano"
    assert spec.gamma == 2
    cfg = apply_overrides(cfg, ["workload.gamma=8", "seeds.root=99"])
    assert cfg.workload["gamma"] == 8
    assert cfg.seeds["root"] == 99
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["workload.gama=8"])


def test_open_loop_lambda_derivation():
    cfg = load_config(None)
    cfg.workload["arrival"] = "open"
    spec = config_to_spec(cfg)
    assert spec.open_loop_lambda == pytest.approx(7.0 / 4.0)


def test_cli_unknown_key_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text("[network]\nrt = 1\n", encoding="utf-8")
    code = main(["simulate", "--config", str(path), "--out", str(tmp_path)])
    assert code == 2
    assert "network.rt" in capsys.readouterr().err


def test_cli_cost_outputs(capsys):
    assert main(["cost", "--rate", "5.24", "--price", "80", "--watts", "8"]) == 0
    printed = float(capsys.readouterr().out.strip())
    assert abs(printed - 2.65730e-4) <= 1e-8
    assert main(["cost", "--rate", "1", "--price", "80", "--watts", "8"]) == 0
    printed = float(capsys.readouterr().out.strip())
    assert abs(printed - 1.39244e-3) <= 1e-8
    assert main(["cost", "--rate", "0"]) == 4


def _fast_sim_config(tmp_path) -> Path:
    path = tmp_path / "sim.toml"
    path.write_text(
        "\n".join([
            "[experiment]",
            "num_devices = 2",
            "[workload]",
            "horizon_ms = 8000.0",
            "[seeds]",
            "root = 5",
        ]),
        encoding="utf-8")
    return path


def test_cli_simulate_deterministic_reports(tmp_path, capsys):
    cfg = _fast_sim_config(tmp_path)
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    assert main(["simulate", "--config", str(cfg), "--scenario", "sled",
                 "--out", str(out_a)]) == 0
    assert main(["simulate", "--config", str(cfg), "--scenario", "sled",
                 "--out", str(out_b)]) == 0
    assert (out_a / "report.json").read_bytes() == (out_b / "report.json").read_bytes()
    assert (out_a / "server_metrics.csv").read_bytes() == \
        (out_b / "server_metrics.csv").read_bytes()
    report = json.loads((out_a / "report.json").read_text())
    assert report["wstgr_tokens_per_s"] > 0


def test_cli_simulate_edge_only_matches_draft_rate(tmp_path):
    cfg = _fast_sim_config(tmp_path)
    out = tmp_path / "edge"
    assert main(["simulate", "--config", str(cfg), "--scenario", "edge-only",
                 "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    # Sum of standalone draft rates within 5% (2 devices at 7.0 tokens/s).
    assert abs(report["wstgr_tokens_per_s"] - 14.0) / 14.0 < 0.05


def test_cli_sweep_gamma_rows(tmp_path):
    cfg = _fast_sim_config(tmp_path)
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(cfg), "--param", "gamma",
                 "--values", "1,2", "--out", str(out)]) == 0
    lines = (out / "fig5_tradeoff.csv").read_text().strip().splitlines()
    assert len(lines) == 3  # header + one row per value


def test_cli_sweep_rejects_unknown_param_and_bad_values(tmp_path):
    with pytest.raises(SystemExit):  # argparse enforces the choices
        main(["sweep", "--param", "pressure", "--values", "1",
              "--out", str(tmp_path)])
    code = main(["sweep", "--param", "gamma", "--values", "x",
                 "--out", str(tmp_path)])
    assert code == 2
