"""Unit tests for config parsing, validation probes and the command line."""

import json
import os
from pathlib import Path

import pytest

from agebranch import cli
from agebranch.config import (
    ConfigError,
    build_model,
    load_config,
    parse_function,
    validate_config,
)

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def _write_config(tmp_path, body, name="exp.toml"):
    p = tmp_path / name
    p.write_text(body)
    return str(p)


BASE = """
[model]
family = "constant_rates"

[model.params]
b = 0.5
h = 0.3

[initial]
cohorts = [[0, 0.0, 1.0]]

[run]
T = 0.5
K = [20, 40]
replicates = 4
master_seed = 12345
time_points = 6
dt = 0.01
qv_substeps = 25

[outputs]
dir = "out/unit"
functions = ["const"]
stages = ["simulate"]
"""


class TestConfigParsing:
    def test_bundled_config_loads(self):
        cfg = load_config(str(CONFIG_DIR / "martingale-centering.toml"))
        assert cfg.K_list == [200]
        assert cfg.stages == ["simulate", "martingale"] or "martingale" in cfg.stages
        assert len(cfg.config_hash) == 64

    def test_hash_tracks_content(self, tmp_path):
        a = load_config(_write_config(tmp_path, BASE, "a.toml"))
        b = load_config(_write_config(tmp_path, BASE.replace("b = 0.5", "b = 0.6"), "b.toml"))
        same = load_config(_write_config(tmp_path, BASE, "c.toml"))
        assert a.config_hash != b.config_hash
        assert a.config_hash == same.config_hash

    @pytest.mark.parametrize(
        "mutation",
        [
            ("master_seed = 12345", ""),  # seed is mandatory
            ("K = [20, 40]", "K = [40, 20]"),  # must be strictly increasing
            ('stages = ["simulate"]', 'stages = ["frobnicate"]'),
            ('functions = ["const"]', 'functions = ["spline"]'),
            ("T = 0.5", "T = -1.0"),
            ("replicates = 4", "replicates = 0"),
        ],
    )
    def test_schema_violations_rejected(self, tmp_path, mutation):
        old, new = mutation
        bad = BASE.replace(old, new)
        with pytest.raises(ConfigError):
            load_config(_write_config(tmp_path, bad))

    def test_unknown_family_rejected(self, tmp_path):
        bad = BASE.replace('family = "constant_rates"', 'family = "unknown_family"')
        with pytest.raises(ConfigError):
            build_model(load_config(_write_config(tmp_path, bad)))


class TestFunctionGrammar:
    @pytest.mark.parametrize(
        "spec,expected_name",
        [
            ("const", "const[1]"),
            ("const:2.5", "const[2.5]"),
            ("age", "age^1"),
            ("age:2", "age^2"),
            ("type:1", "type[1]"),
            ("window:0.5:1.5", "window[0.5,1.5]"),
        ],
    )
    def test_single_sex_specs(self, spec, expected_name):
        assert parse_function(spec).name == expected_name

    @pytest.mark.parametrize("spec", ["", "age:x", "window:1", "type:", "nope:1"])
    def test_malformed_specs_rejected(self, spec):
        with pytest.raises(ConfigError):
            parse_function(spec)


class TestValidation:
    def test_all_bundled_configs_validate(self):
        for path in sorted(CONFIG_DIR.glob("*.toml")):
            cfg = load_config(str(path))
            report = validate_config(cfg)
            bad = [e for e in report if e["status"] == "failed"]
            assert not bad, f"{path.name}: {bad}"

    def test_probe_checks_present(self, tmp_path):
        cfg = load_config(_write_config(tmp_path, BASE))
        checks = {e["check"] for e in validate_config(cfg)}
        assert "model-build" in checks
        assert any("bound" in c for c in checks)


class TestCommandLine:
    def test_missing_config_is_usage_error(self, tmp_path):
        assert cli.main(["run", str(tmp_path / "nope.toml")]) == cli.EXIT_USAGE

    def test_malformed_config_is_usage_error(self, tmp_path):
        p = _write_config(tmp_path, "this is not [valid\ntoml")
        assert cli.main(["run", p]) == cli.EXIT_USAGE

    def test_run_writes_outputs_and_manifest(self, tmp_path):
        p = _write_config(tmp_path, BASE)
        out = str(tmp_path / "out")
        assert cli.main(["run", p, "--output-dir", out]) == cli.EXIT_PASS
        files = sorted(os.listdir(out))
        assert "manifest.json" in files
        with open(os.path.join(out, "manifest.json")) as fh:
            manifest = json.load(fh)
        assert manifest["master_seed"] == 12345
        assert manifest["outputs"]  # every data file is hashed

    def test_worker_count_does_not_change_bytes(self, tmp_path):
        p = _write_config(tmp_path, BASE)
        blobs = []
        for tag, workers in (("w1", "1"), ("w3", "3")):
            out = str(tmp_path / tag)
            assert cli.main(["run", p, "--output-dir", out, "--workers", workers]) == 0
            blobs.append({
                name: (tmp_path / tag / name).read_bytes()
                for name in sorted(os.listdir(out))
            })
        assert blobs[0] == blobs[1]

    def test_failed_check_maps_to_exit_one(self, tmp_path):
        body = BASE.replace('stages = ["simulate"]', 'stages = ["lln"]\nlln_ratio_min = 1000.0')
        p = _write_config(tmp_path, body)
        out = str(tmp_path / "out")
        assert cli.main(["run", p, "--output-dir", out]) == cli.EXIT_CHECK_FAILED
        with open(os.path.join(out, "lln.json")) as fh:
            assert json.load(fh)["passed"] is False

    def test_report_verb_renders_verdicts(self, tmp_path, capsys):
        body = BASE.replace('stages = ["simulate"]', 'stages = ["martingale"]')
        p = _write_config(tmp_path, body)
        out = str(tmp_path / "out")
        assert cli.main(["run", p, "--output-dir", out]) == cli.EXIT_PASS
        capsys.readouterr()
        assert cli.main(["report", out]) == cli.EXIT_PASS
        text = capsys.readouterr().out
        assert "PASS" in text and "FAIL" not in text

    def test_validate_verb(self, capsys):
        path = str(CONFIG_DIR / "martingale-centering.toml")
        assert cli.main(["validate", path]) == cli.EXIT_PASS
        report = json.loads(capsys.readouterr().out)
        assert all(e["status"] != "failed" for e in report)
