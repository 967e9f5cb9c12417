import dataclasses
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mfbelavkin import cli, experiments
from mfbelavkin.config import ConfigInvalid, config_from_dict, load_config
from mfbelavkin.experiments import EXPERIMENTS, ExperimentFailed, catalog, run_experiment
from mfbelavkin.quantum import SIGMA_Y
from mfbelavkin.sde import StepError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SMALL = """
experiment = "{experiment}"
seed = 7
model = "{model}"
record_every = 5

[grid]
T = 0.05
dt = 1e-2

[params]
eta = 1.0
H = "sigma_z"
Hhat = "sigma_x"
L = "sigma_z"
kernel = "photon_exchange"

[initial]
bloch = [0.25, -0.25, 0.0]

[control]
type = "{law}"

[run]
n_paths = 4
"""


def small_config(tmp_path, experiment="reduction", model="meanfield", law="zero", extra=""):
    path = tmp_path / f"{experiment}.toml"
    path.write_text(SMALL.format(experiment=experiment, model=model, law=law) + extra)
    return path


def base_dict():
    return {
        "experiment": "reduction",
        "seed": 1,
        "grid": {"T": 1.0, "dt": 0.01},
        "params": {"eta": 1.0},
        "initial": {"bloch": [0.0, 0.0, 0.5]},
    }


class TestConfig:
    @pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.toml")))
    def test_bundled_configs_validate(self, name):
        load_config(CONFIGS / name, EXPERIMENTS)

    def test_missing_seed(self):
        raw = base_dict()
        del raw["seed"]
        with pytest.raises(ConfigInvalid) as exc:
            config_from_dict(raw, EXPERIMENTS)
        assert exc.value.field == "seed"

    @pytest.mark.parametrize(
        "patch, field",
        [
            (lambda r: r["params"].update(eta=0.0), "params.eta"),
            (lambda r: r["params"].update(eta=1.5), "params.eta"),
            (lambda r: r["grid"].update(dt=0.0), "grid.dt"),
            (lambda r: r["grid"].update(T=0.015), "grid.T"),
            (lambda r: r["params"].update(H="sigma_w"), "params.H"),
            (lambda r: r["params"].update(kernel="bogus"), "params.kernel"),
            (lambda r: r.update(model="nope"), "model"),
            (lambda r: r.update(experiment="nope"), "experiment"),
            (lambda r: r.update(control={"type": "zero", "law": "zero"}), "control.type"),
            (lambda r: r.update(control={"type": "magic"}), "control.type"),
            (lambda r: r.update(bogus=1), "bogus"),
            (lambda r: r["initial"].update(bloch=[1.0, 1.0, 0.0]), "initial.bloch"),
        ],
    )
    def test_invalid_fields(self, patch, field):
        raw = base_dict()
        patch(raw)
        with pytest.raises(ConfigInvalid) as exc:
            config_from_dict(raw, EXPERIMENTS)
        assert exc.value.field == field

    def test_matrix_pairs(self):
        raw = base_dict()
        raw["params"]["Hhat"] = [[[0, 0], [0, -1]], [[0, 1], [0, 0]]]
        cfg = config_from_dict(raw, EXPERIMENTS)
        np.testing.assert_array_equal(cfg.Hhat, SIGMA_Y)

    def test_law_alias(self):
        raw = base_dict()
        raw["control"] = {"law": "stabilize", "target": "rho_e"}
        assert config_from_dict(raw, EXPERIMENTS).control.law == "stabilize"

    def test_hash_is_stable_and_roundtrips(self):
        a = config_from_dict(base_dict(), EXPERIMENTS)
        b = config_from_dict(json.loads(json.dumps(a.to_dict())), EXPERIMENTS)
        assert a.config_hash() == b.config_hash()

    def test_unreadable(self, tmp_path):
        with pytest.raises(ConfigInvalid) as exc:
            load_config(tmp_path / "absent.toml")
        assert exc.value.field == "path"

    def test_syntax(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("seed = = 1\n")
        with pytest.raises(ConfigInvalid) as exc:
            load_config(p)
        assert exc.value.field == "syntax"


class TestCatalog:
    @pytest.mark.parametrize("name", ["reduction", "stabilization", "chaos-scaling", "lemma1-sweep",
                                      "picard-vs-particles"])
    def test_lists_experiment(self, name):
        assert name in catalog()

    def test_list_command(self, capsys):
        assert cli.main(["list"]) == 0
        assert "lemma1-sweep" in capsys.readouterr().out


def data_files(out):
    return {p.name: p.read_bytes() for p in sorted(Path(out).iterdir()) if p.suffix == ".csv"}


class TestRun:
    @pytest.mark.parametrize("experiment, model, law", [
        ("reduction", "meanfield", "zero"),
        ("stabilization", "meanfield", "stabilize"),
        ("reduction", "meanfield-bloch", "zero"),
    ])
    def test_rerun_is_byte_identical(self, tmp_path, experiment, model, law):
        cfg = small_config(tmp_path, experiment, model, law)
        assert cli.main(["run", str(cfg), "--out", str(tmp_path / "a"), "--threads", "1"]) == 0
        assert cli.main(["run", str(cfg), "--out", str(tmp_path / "b"), "--threads", "1"]) == 0
        a, b = data_files(tmp_path / "a"), data_files(tmp_path / "b")
        assert a and a == b
        ma = (tmp_path / "a" / "manifest.json").read_text().splitlines()
        mb = (tmp_path / "b" / "manifest.json").read_text().splitlines()
        diff = [i for i, (x, y) in enumerate(zip(ma, mb)) if x != y]
        assert len(ma) == len(mb) and all('"timestamp"' in ma[i] for i in diff)

    def test_manifest_reruns_experiment(self, tmp_path):
        cfg = small_config(tmp_path)
        run_experiment(load_config(cfg, EXPERIMENTS), tmp_path / "a")
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        again = config_from_dict(manifest["config"], EXPERIMENTS)
        assert again.config_hash() == manifest["config_hash"]
        run_experiment(again, tmp_path / "b")
        assert data_files(tmp_path / "a") == data_files(tmp_path / "b")
        assert set(manifest["files"]) <= set(data_files(tmp_path / "a"))

    def test_seed_override_changes_data(self, tmp_path):
        cfg = small_config(tmp_path)
        cli.main(["run", str(cfg), "--out", str(tmp_path / "a")])
        cli.main(["run", str(cfg), "--out", str(tmp_path / "b"), "--seed", "8"])
        assert data_files(tmp_path / "a") != data_files(tmp_path / "b")

    def test_default_output_root_from_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(experiments.OUT_ENV, str(tmp_path / "root"))
        assert cli.main(["run", str(small_config(tmp_path))]) == 0
        assert (tmp_path / "root" / "reduction_7" / "manifest.json").exists()

    def test_validate(self, tmp_path, capsys):
        assert cli.main(["validate", str(small_config(tmp_path))]) == 0
        assert capsys.readouterr().out.startswith("ok reduction ")

    def test_config_error_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.toml"
        bad.write_text(small_config(tmp_path).read_text().replace("seed = 7\n", ""))
        assert cli.main(["run", str(bad)]) == cli.EXIT_CONFIG
        err = json.loads(capsys.readouterr().err.strip())
        assert err == {"error": "ConfigInvalid", "field": "seed", "reason": "missing (no wall-clock default)"}

    def test_wrong_model_for_experiment(self, tmp_path, capsys):
        assert cli.main(["run", str(small_config(tmp_path, model="nqubit"))]) == cli.EXIT_CONFIG
        assert json.loads(capsys.readouterr().err)["field"] == "model"

    def test_failure_exit_code(self, tmp_path, monkeypatch, capsys):
        def boom(cfg, out, threads):
            raise StepError(3, FloatingPointError("non-finite state"))

        monkeypatch.setitem(EXPERIMENTS, "reduction", dataclasses.replace(EXPERIMENTS["reduction"], runner=boom))
        assert cli.main(["run", str(small_config(tmp_path)), "--out", str(tmp_path / "o")]) == cli.EXIT_FAILED
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "ExperimentFailed" and err["step"] == 3 and err["seed"] == 7

    def test_experiment_failed_carries_context(self):
        exc = ExperimentFailed("reduction", 5, StepError(2, ValueError("x")))
        assert exc.step == 2 and "seed 5" in str(exc)

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "mfbelavkin", "validate", str(small_config(tmp_path))],
                              capture_output=True, text=True)
        assert proc.returncode == 0 and proc.stdout.startswith("ok ")
