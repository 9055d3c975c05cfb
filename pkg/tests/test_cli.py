import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from dbnlc import cli
from dbnlc.pipeline import STAGES, ConfigError, ExperimentConfig, StageError, run_pipeline, sha256

DATA = Path(__file__).resolve().parents[1] / "data" / "synthetic"


@pytest.fixture(scope="module")
def study(tmp_path_factory):
    root = tmp_path_factory.mktemp("study")
    shutil.copytree(DATA, root, dirs_exist_ok=True)
    # a small K sweep keeps these tests quick; the full sweep runs in the acceptance suite
    cfg = json.loads((root / "config.json").read_text())
    cfg.update(gmm_k_max=5, gmm_restarts=3)
    (root / "config.json").write_text(json.dumps(cfg))
    return root


def _config(root, **over):
    doc = json.loads((root / "config.json").read_text())
    doc.update(over)
    p = root / f"cfg_{len(over)}_{abs(hash(json.dumps(over, sort_keys=True)))}.json"
    p.write_text(json.dumps(doc))
    return p


def test_config_defaults_and_paths(study):
    cfg = ExperimentConfig.from_file(study / "config.json")
    assert cfg.questionnaire == study / "questionnaire.csv"
    assert cfg.out_dir == study / "out"
    assert cfg.alpha == 0.05 and cfg.max_cond == 3 and cfg.ess == 1.0 and cfg.impute_k == 2
    assert cfg.train_weeks == (1, 3) and cfg.forecast_weeks == (4, 5)
    assert ExperimentConfig.from_file(study / "config.json", seed=7, workers=2).seed == 7


@pytest.mark.parametrize(
    "over,msg",
    [
        ({"train_weeks": [1, 1]}, "two weeks"),
        ({"forecast_weeks": [3, 5]}, "after the training"),
        ({"alpha": 1.5}, "alpha"),
        ({"bogus": 1}, "unknown config keys"),
        ({"targets": ["Nope"]}, "Nope"),
    ],
)
def test_config_validation(study, over, msg):
    with pytest.raises(ConfigError, match=msg):
        ExperimentConfig.from_file(_config(study, **over))


def test_cli_validation_exit_code(study, caplog):
    assert cli.main(["run", "--config", str(_config(study, train_weeks=[1, 1]))]) == 1
    assert "two weeks" in caplog.text
    assert cli.main(["learn", "--config", str(study / "missing.json")]) == 1


def test_missing_au_dir_fails_at_cluster_stage(study, tmp_path):
    cfg = ExperimentConfig.from_file(_config(study, au_dir="nowhere"), out_dir=tmp_path / "o")
    with pytest.raises(StageError) as err:
        run_pipeline(cfg)
    assert err.value.stage == "cluster"
    assert not (tmp_path / "o" / "model.json").exists()
    assert not (tmp_path / "o" / "imputed.csv").exists()


def test_stage_without_inputs_reports_missing_file(study, tmp_path, caplog):
    code = cli.main(["fit", "--config", str(study / "config.json"), "--out", str(tmp_path / "x")])
    assert code == 1
    assert "not found" in caplog.text


def test_runtime_failure_exit_code_and_stderr(study, tmp_path):
    out = tmp_path / "o"
    cfg = str(study / "config.json")
    for stage in ("impute", "cluster", "discretize", "learn"):
        assert cli.main([stage, "--config", cfg, "--out", str(out)]) == 0
    (out / "structure.json").write_text("{not json")
    proc = subprocess.run(
        [sys.executable, "-m", "dbnlc.cli", "fit", "--config", cfg, "--out", str(out)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 2
    assert proc.stdout == ""
    assert "stage 'fit' failed" in proc.stderr


def test_stages_compose_to_run(study, tmp_path):
    cfg_path = str(study / "config.json")
    assert cli.main(["run", "--config", cfg_path, "--out", str(tmp_path / "run")]) == 0
    for stage in STAGES:
        assert cli.main([stage, "--config", cfg_path, "--out", str(tmp_path / "staged")]) == 0
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    for name, digest in manifest["artifacts"].items():
        assert sha256(tmp_path / "staged" / name) == digest, name


def test_run_outputs(study, tmp_path):
    cfg = ExperimentConfig.from_file(study / "config.json", out_dir=tmp_path / "o")
    manifest = run_pipeline(cfg)
    names = set(manifest["artifacts"])
    for required in ("structure.dot", "adjacency_within.csv", "adjacency_between.csv", "model.json",
                     "quantization.json", "bic_aic.csv", "forecast.csv", "report.txt"):
        assert required in names
    rows = (tmp_path / "o" / "forecast.csv").read_text().splitlines()
    assert len(rows) == 1 + 18
    s9 = [r for r in rows if r.startswith("S9,5,")][0].split(",")
    assert all(x != "" for x in s9[2:10])
    assert s9[-2:] == ["", ""]
    report = (tmp_path / "o" / "report.txt").read_text()
    assert report.splitlines()[-1].split()[-2:] == ["--", "--"]
    model = json.loads((tmp_path / "o" / "model.json").read_text())
    assert model["training_rows"] == 18
    structure = json.loads((tmp_path / "o" / "structure.json").read_text())
    exo = {f"{p}_t" for p in ("Ext", "Agr", "Consc", "Neur", "Open")}
    assert all(structure["parents"][n] == [] for n in exo)
    assert set(structure["parents"]["WB_t"]) <= {"WB_t-1"}
    profiles = (tmp_path / "o" / "profiles.csv").read_text().splitlines()
    assert len(profiles) == 1 + 2 * 5
