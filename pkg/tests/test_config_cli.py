import filecmp
import json

import pytest
import yaml

from mdpchain.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, main
from mdpchain.config import dump_config, load_config, parse_config
from mdpchain.errors import ConfigurationError


@pytest.mark.parametrize("alpha", [0.5, 1.0])
def test_alpha_boundary_rejected(alpha):
    with pytest.raises(ConfigurationError, match="alpha"):
        parse_config({"plan": {"alpha": alpha}})


def test_unknown_key_rejected():
    with pytest.raises(ConfigurationError, match="plan.alpah"):
        parse_config({"plan": {"alpah": 0.6}})


def test_replicate_floor():
    with pytest.raises(ConfigurationError):
        parse_config({"plan": {"replicates": 10}})


def test_yaml_round_trip(small_config, tmp_path):
    cfg = load_config(small_config)
    again = tmp_path / "again.yaml"
    again.write_text(dump_config(cfg))
    assert load_config(again) == cfg
    assert load_config(again).config_hash() == cfg.config_hash()


def test_hash_ignores_workers_and_output(small_config):
    data = yaml.safe_load(small_config.read_text())
    base = parse_config(data).config_hash()
    assert parse_config(data | {"workers": 4, "output_dir": "elsewhere"}).config_hash() == base
    data["plan"]["master_seed"] = 8
    assert parse_config(data).config_hash() != base


def test_missing_config_file(tmp_path, capsys):
    assert main(["simulate", str(tmp_path / "absent.yaml")]) == EXIT_CONFIG
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "configuration"


def test_cli_alpha_half_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("plan: {alpha: 0.5}\n")
    assert main(["deviate", str(path), "-o", str(tmp_path / "out")]) == EXIT_CONFIG
    assert "alpha" in capsys.readouterr().err


def test_cli_infeasible_plan_lists_cells(small_config, tmp_path, capsys):
    data = yaml.safe_load(small_config.read_text())
    data["plan"]["y_grid"] = [[0.0], [8.0]]
    path = tmp_path / "far.yaml"
    path.write_text(yaml.safe_dump(data))
    assert main(["deviate", str(path), "-o", str(tmp_path / "out")]) == EXIT_CONFIG
    diag = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert diag["error"] == "plan_infeasible"
    assert [16, [0.0]] in diag["feasible_cells"]


def test_report_on_empty_dir(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == EXIT_CONFIG
    assert "no results" in capsys.readouterr().err


def test_example_list(capsys):
    assert main(["example", "--list"]) == EXIT_OK
    out = capsys.readouterr().out
    for name in ("linear_ar", "nonlinear_contraction", "sign_chain", "estimator"):
        assert name in out


def test_example_unknown_name():
    with pytest.raises(SystemExit):
        main(["example", "nope"])


def test_poisson_and_rate_commands(small_config, tmp_path, capsys):
    assert main(["poisson", str(small_config), "-o", str(tmp_path / "p")]) == EXIT_OK
    assert main(["rate", str(small_config), "-o", str(tmp_path / "r")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out
    assert (tmp_path / "r" / "obligations.json").exists()


def test_report_summarises_results(small_config, tmp_path):
    main(["rate", str(small_config), "-o", str(tmp_path / "res" / "rate")])
    assert main(["report", str(tmp_path / "res")]) == EXIT_OK
    text = (tmp_path / "res" / "report.md").read_text()
    assert "penrose" in text and "overall: PASS" in text


def _tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(_tree_equal(a / d, b / d) for d in cmp.common_dirs)


@pytest.mark.parametrize("command", ["deviate", "martingale"])
def test_outputs_identical_across_workers(small_config, tmp_path, command):
    one, many = tmp_path / "w1", tmp_path / "w4"
    code1 = main([command, str(small_config), "-o", str(one), "--workers", "1"])
    code4 = main([command, str(small_config), "-o", str(many), "--workers", "4"])
    assert code1 == code4 and code1 in (EXIT_OK, EXIT_FAIL)
    assert _tree_equal(one, many)
