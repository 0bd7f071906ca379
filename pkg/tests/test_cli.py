import json

import pytest

from mvsde import cli
from mvsde.cli import DEFAULTS, main, parse_config
from mvsde.errors import ConfigError


def _write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def _run(tmp_path, command, doc, *extra, out="out"):
    cfg = _write(tmp_path, doc)
    return main([command, "--config", cfg, "--out", str(tmp_path / out), *extra])


def _stderr_json(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


SMALL = {"model": "systemic_risk", "n_particles": 40, "level": 4, "level_min": 3, "level_max": 5}


class TestParseConfig:
    def test_minimal(self):
        cfg = parse_config(json.dumps({"model": "systemic_risk",
                                       "model_params": {"a": 1.0, "kappa1": -0.5,
                                                        "kappa2": 0.5, "sigma0": 0.7}}))
        assert cfg["scheme"] == "scheme1_decomposable"
        assert cfg["model_params"]["sigma0"] == 0.7
        assert parse_config("{}")["n_particles"] == DEFAULTS["n_particles"]

    def test_degenerate_diffusion(self):
        with pytest.raises(ConfigError) as info:
            parse_config(json.dumps({"model_params": {"sigma0": 0.0}}))
        assert any("DegenerateDiffusionError" in e for e in info.value.errors)

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError) as info:
            parse_config(json.dumps({"sigma00": 0.7}))
        assert any("sigma00" in e for e in info.value.errors)
        with pytest.raises(ConfigError, match="sigma00"):
            parse_config(json.dumps({"model_params": {"sigma00": 0.7}}))

    def test_all_errors_reported(self):
        doc = {"sigma00": 1, "n_particles": 0, "scheme": "euler", "model_params": {"kappa1": 0.3}}
        with pytest.raises(ConfigError) as info:
            parse_config(json.dumps(doc))
        text = " | ".join(info.value.errors)
        assert "sigma00" in text and "n_particles" in text and "euler" in text
        assert "kappa1" in text

    def test_domain_checks(self):
        for doc, needle in (({"level_min": 5, "level_max": 6}, "level_max"),
                            ({"model": "neuronal"}, "does not apply"),
                            ({"T": 0.3}, "integer number of steps"),
                            ({"grid_min": 1.0, "grid_max": 0.0}, "grid_min")):
            with pytest.raises(ConfigError, match=needle):
                parse_config(json.dumps(doc))

    def test_malformed(self):
        with pytest.raises(ConfigError, match="malformed"):
            parse_config("{not json")
        with pytest.raises(ConfigError, match="object"):
            parse_config("[1, 2]")

    def test_overrides(self):
        cfg = parse_config("{}", {"model_params.a": 2.0, "seed": 9})
        assert cfg["model_params"]["a"] == 2.0 and cfg["seed"] == 9
        with pytest.raises(ConfigError, match="dotted"):
            parse_config("{}", {"scheme.x": 1})


class TestCommands:
    def test_simulate_byte_identical(self, tmp_path, capsys):
        doc = {**SMALL, "path_stride": 4}
        assert _run(tmp_path, "simulate", doc, out="a") == 0
        assert _run(tmp_path, "simulate", doc, out="b") == 0
        for name in ("terminal.csv", "paths.csv"):
            a = (tmp_path / "a" / name).read_bytes()
            assert a == (tmp_path / "b" / name).read_bytes()
        lines = (tmp_path / "a" / "terminal.csv").read_text().splitlines()
        assert lines[0].startswith("# config: ")
        echo = json.loads(lines[0][len("# config: "):])
        assert echo["seed"] == 0 and echo["n_particles"] == 40 and "out" not in echo
        assert lines[1] == "particle,state" and len(lines) == 42
        paths = (tmp_path / "a" / "paths.csv").read_text().splitlines()
        assert paths[1] == "step,t,particle,state"
        assert len(paths) == 2 + 5 * 40
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["command"] == "simulate"

    def test_floats_round_trip(self, tmp_path):
        assert _run(tmp_path, "simulate", SMALL) == 0
        rows = (tmp_path / "out" / "terminal.csv").read_text().splitlines()[2:]
        for row in rows:
            text = row.split(",")[1]
            assert repr(float(text)) == text

    def test_converge_outputs(self, tmp_path):
        assert _run(tmp_path, "converge", SMALL, "--seed", "3") == 0
        csv = (tmp_path / "out" / "report.csv").read_text().splitlines()
        assert csv[1] == "level,rmse" and [r.split(",")[0] for r in csv[2:]] == ["3", "4", "5"]
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["seed"] == 3 and report["config"]["seed"] == 3
        assert {"fitted_order", "fit_residual", "levels", "rmse"} <= set(report)

    def test_converge_thread_hint_invariant(self, tmp_path):
        doc = {**SMALL, "n_particles": 600}
        assert _run(tmp_path, "converge", doc, "--threads", "1", out="t1") == 0
        assert _run(tmp_path, "converge", doc, "--threads", "4", out="t4") == 0
        assert (tmp_path / "t1" / "report.csv").read_bytes() == (tmp_path / "t4" / "report.csv").read_bytes()

    def test_occupation(self, tmp_path):
        assert _run(tmp_path, "occupation", {**SMALL, "eps_values": [0.05, 0.1, 0.2]}) == 0
        rows = (tmp_path / "out" / "occupation.csv").read_text().splitlines()
        assert rows[1] == "eps,estimate"
        est = [float(r.split(",")[1]) for r in rows[2:]]
        assert est == sorted(est) and est[-1] <= 1.0

    def test_transform_check(self, tmp_path, capsys):
        assert _run(tmp_path, "transform-check", {"grid_points": 100000}) == 0
        result = json.loads((tmp_path / "out" / "transform_check.json").read_text())
        assert result["max_roundtrip_error"] <= 1e-10 and result["min_dG"] > 0.5
        header = (tmp_path / "out" / "transform_grid.csv").read_text().splitlines()[1]
        assert header == "x,G,dG,d2G,roundtrip_error"

    def test_transform_check_modulated_and_neuronal(self, tmp_path, capsys):
        assert _run(tmp_path, "transform-check", {"model": "modulated_jump", "scheme": "scheme2_direct",
                                                  "grid_points": 1000}, out="m") == 0
        assert _run(tmp_path, "transform-check", {"model": "neuronal", "scheme": "scheme2_direct",
                                                  "grid_points": 1000}, out="n") == 1
        assert _stderr_json(capsys)["error"] == "ConfigError"
        assert _run(tmp_path, "transform-check", {"model": "neuronal", "scheme": "scheme2_direct",
                                                  "grid_points": 1000, "transform_alpha": 0.5},
                    out="n2") == 0

    def test_chaos(self, tmp_path):
        doc = {**SMALL, "scheme": "scheme2_direct", "n_values": [10, 40], "chaos_level": 4,
               "chaos_replicas": 2}
        assert _run(tmp_path, "chaos", doc) == 0
        rows = (tmp_path / "out" / "chaos.csv").read_text().splitlines()
        assert rows[1] == "n,w2" and [r.split(",")[0] for r in rows[2:]] == ["10", "40"]

    def test_set_overrides(self, tmp_path):
        assert _run(tmp_path, "simulate", SMALL, "--set", "n_particles=7",
                    "--set", "model_params.x0=0.25") == 0
        lines = (tmp_path / "out" / "terminal.csv").read_text().splitlines()
        echo = json.loads(lines[0][len("# config: "):])
        assert echo["n_particles"] == 7 and echo["model_params"]["x0"] == 0.25
        assert len(lines) == 9


class TestFailures:
    def test_config_error_exit(self, tmp_path, capsys):
        assert _run(tmp_path, "simulate", {"sigma00": 1, "model_params": {"sigma0": 0}}) == 2
        err = _stderr_json(capsys)
        assert err["error"] == "ConfigError" and len(err["errors"]) >= 2
        assert not (tmp_path / "out").exists()

    def test_missing_config(self, tmp_path, capsys):
        assert main(["simulate", "--config", str(tmp_path / "nope.json")]) == 2
        assert "cannot read" in _stderr_json(capsys)["message"]

    def test_bad_set(self, tmp_path, capsys):
        assert _run(tmp_path, "simulate", SMALL, "--set", "novalue") == 2

    def test_failed_check_removes_outputs(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setattr(cli, "ROUNDTRIP_LIMIT", 0.0)
        assert _run(tmp_path, "transform-check", {"grid_points": 1000}) == 1
        err = _stderr_json(capsys)
        assert err["error"] == "CheckFailed" and err["result"]["roundtrip_ok"] is False
        assert list((tmp_path / "out").iterdir()) == []

    def test_runtime_error_removes_outputs(self, tmp_path, capsys, monkeypatch):
        def boom(paths, eps):
            raise ArithmeticError("synthetic failure")

        monkeypatch.setattr(cli.analysis, "occupation_estimate", boom)
        assert _run(tmp_path, "occupation", SMALL) == 1
        assert _stderr_json(capsys)["message"] == "synthetic failure"
        out = tmp_path / "out"
        assert not out.exists() or list(out.iterdir()) == []
