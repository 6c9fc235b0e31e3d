import json
import os

import numpy as np
import pytest

from visitsim.cli import PRESETS, main

CFG = """
[scenario]
family = joint_model
weibull_scale = 0.30
gamma = 0.0
n_subjects = 25
seed = 31
tag = cli_demo
"""


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "demo.cfg"
    path.write_text(CFG)
    return str(path)


class TestSimulate:
    def test_writes_panel_and_manifest(self, cfg_path, tmp_path, capsys):
        out = tmp_path / "panel.csv"
        assert main(["simulate", "--config", cfg_path, "--out", str(out)]) == 0
        assert out.exists()
        header = out.read_text().splitlines()[0]
        assert header == "subject_id,z,censoring_time,visit_time,y"
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["command"] == "simulate"
        assert manifest["master_seed"] == 31
        assert manifest["config"]["tag"] == "cli_demo"
        assert "panel.csv" in manifest["outputs"]

    def test_repeat_identical(self, cfg_path, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        main(["simulate", "--config", cfg_path, "--seed", "42", "--out", str(a)])
        main(["simulate", "--config", cfg_path, "--seed", "42", "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_env_seed_fallback(self, cfg_path, tmp_path, monkeypatch):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        monkeypatch.setenv("VISITSIM_SEED", "99")
        main(["simulate", "--config", cfg_path, "--out", str(a)])
        monkeypatch.delenv("VISITSIM_SEED")
        main(["simulate", "--config", cfg_path, "--seed", "99", "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_preset_resolution(self, tmp_path):
        out = tmp_path / "panel.csv"
        assert main(["simulate", "--config", "jm_g0_l010.cfg", "--seed", "1", "--out", str(out)]) == 0
        assert out.exists()

    def test_unknown_config_exit_code(self, tmp_path, capsys):
        rc = main(["simulate", "--config", "no_such.cfg", "--out", str(tmp_path / "x.csv")])
        assert rc == 1
        assert "presets" in capsys.readouterr().err

    def test_bad_flag_exit_code(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--bogus"])
        assert exc.value.code == 1


class TestFitCommand:
    @pytest.fixture
    def panel_path(self, cfg_path, tmp_path):
        out = tmp_path / "panel.csv"
        main(["simulate", "--config", cfg_path, "--out", str(out)])
        return str(out)

    @pytest.mark.parametrize("model", ["B", "D", "E"])
    def test_fit_models(self, panel_path, tmp_path, model):
        out = tmp_path / f"fit_{model}.json"
        assert main(["fit", "--panel", panel_path, "--model", model, "--out", str(out)]) == 0
        data = json.loads(out.read_text())
        assert data["model"] == model
        assert data["converged"] is True
        assert ("loglik" in data and data["loglik"] is not None) == (model != "E")
        assert set(data["params"]["alpha1"]) == {"est", "se"}

    def test_fit_joint_with_dump(self, panel_path, tmp_path):
        out = tmp_path / "fit_A.json"
        dump = tmp_path / "contribs.csv"
        rc = main(["fit", "--panel", panel_path, "--model", "A", "--out", str(out),
                   "--dump-loglik", str(dump), "--gh-order", "15"])
        assert rc == 0
        data = json.loads(out.read_text())
        lines = dump.read_text().splitlines()
        assert lines[0] == "subject_id,loglik"
        total = sum(float(line.split(",")[1]) for line in lines[1:])
        assert total == pytest.approx(data["loglik"], abs=1e-6)


class TestRunStudyCommand:
    def test_outputs_and_manifest(self, cfg_path, tmp_path):
        out_dir = tmp_path / "study"
        rc = main(["run-study", "--config", cfg_path, "--reps", "3", "--models", "D,E",
                   "--out-dir", str(out_dir), "--threads", "1"])
        assert rc == 0
        est = (out_dir / "estimates.csv").read_text().splitlines()
        assert est[0] == "scenario,rep,model,param,est,se,converged"
        assert len(est) == 1 + 3 * (5 + 3)
        perf = (out_dir / "performance.csv").read_text().splitlines()
        assert perf[0] == ("scenario,model,param,truth,mean_est,bias,bias_mcse,emp_se,"
                           "mod_se,mse,mse_mcse,coverage,coverage_mcse,conv_rate")
        manifest = json.loads((out_dir / "manifest.json").read_text())
        assert manifest["command"] == "run-study"
        assert manifest["replications"] == 3
        assert manifest["models"] == ["D", "E"]

    def test_reproducible_from_manifest(self, cfg_path, tmp_path):
        d1, d2 = tmp_path / "s1", tmp_path / "s2"
        args = ["run-study", "--config", cfg_path, "--reps", "3", "--models", "D",
                "--threads", "1"]
        main(args + ["--out-dir", str(d1)])
        manifest = json.loads((d1 / "manifest.json").read_text())
        # rebuild the config from the manifest alone and rerun
        cfg2 = tmp_path / "rebuilt.cfg"
        lines = ["[scenario]"]
        for key, val in manifest["config"].items():
            lines.append(f"{key} = {val}")
        cfg2.write_text("\n".join(lines) + "\n")
        main(["run-study", "--config", str(cfg2), "--reps", str(manifest["replications"]),
              "--models", ",".join(manifest["models"]), "--seed", str(manifest["master_seed"]),
              "--threads", "1", "--out-dir", str(d2)])
        assert (d1 / "estimates.csv").read_bytes() == (d2 / "estimates.csv").read_bytes()


class TestSummarizeCommand:
    def test_roundtrip(self, cfg_path, tmp_path):
        out_dir = tmp_path / "study"
        main(["run-study", "--config", cfg_path, "--reps", "3", "--models", "D",
              "--out-dir", str(out_dir), "--threads", "1"])
        out = tmp_path / "perf2.csv"
        rc = main(["summarize", "--estimates", str(out_dir / "estimates.csv"),
                   "--config", cfg_path, "--out", str(out)])
        assert rc == 0
        assert out.read_bytes() == (out_dir / "performance.csv").read_bytes()


class TestDescribeDiagnose:
    def test_describe(self, cfg_path, tmp_path, capsys):
        out = tmp_path / "desc.csv"
        assert main(["describe", "--config", cfg_path, "--reps", "3", "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "scenario,measure,median,q1,q3"
        assert "median rows" in capsys.readouterr().out

    def test_diagnose(self, cfg_path, tmp_path, capsys):
        panel = tmp_path / "panel.csv"
        main(["simulate", "--config", cfg_path, "--out", str(panel)])
        out = tmp_path / "diag.json"
        rc = main(["diagnose", "--panel", str(panel), "--covariate", "z",
                   "--permutations", "99", "--out", str(out)])
        assert rc == 0
        data = json.loads(out.read_text())
        assert data["covariate"] == "z"
        assert "Spearman" in capsys.readouterr().out


class TestPresets:
    def test_all_presets_parse(self, tmp_path):
        for name in PRESETS:
            out = tmp_path / f"{name}.csv"
            rc = main(["simulate", "--config", name, "--seed", "5", "--out", str(out)])
            assert rc == 0, name


class TestHelp:
    @pytest.mark.parametrize("cmd", ["simulate", "fit", "run-study", "summarize",
                                     "describe", "diagnose"])
    def test_subcommand_help(self, cmd, capsys):
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        assert "--" in out

    def test_config_keys_documented(self, capsys):
        with pytest.raises(SystemExit):
            main(["run-study", "--help"])
        out = capsys.readouterr().out
        for key in ("family", "weibull_scale", "sigma_u2", "regular_visits", "censoring_lower"):
            assert key in out
