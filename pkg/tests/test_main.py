import json

import numpy as np
import pandas as pd
import pytest

import main
from conftest import ROOT
from settings import RunConfig, version_string

RECIPE = """\
NAME=blobs
SOURCE=blobs.csv
COLUMNS=4
LABEL_COLUMN=3
CONTINUOUS=0-2
ANOMALY_LABELS=outlier
"""

CONFIG = """\
DATASET=blobs.recipe
MODEL_KIND={kind}
HIDDEN_WIDTHS=4
LATENT_DIM=2
MC_SAMPLES=2
EPOCHS={epochs}
BATCH_SIZE=8
LEARNING_RATE={lr}
CHECKPOINT_STEP=1
SEED=0
SUBSAMPLE_SIZE=5
SCORERS={scorers}
RUNS={runs}
OUTPUT_DIR={out}
"""


@pytest.fixture
def workspace(tmp_path, write_file, monkeypatch):
    monkeypatch.delenv("INFLUENCE_AD_DATA_DIR", raising=False)
    monkeypatch.setenv("INFLUENCE_AD_LOG_LEVEL", "WARNING")
    gen = np.random.default_rng(0)
    normal = gen.normal(size=(40, 3))
    outliers = gen.normal(6.0, 1.0, size=(6, 3))
    lines = [f"{a:.6f},{b:.6f},{c:.6f},inlier" for a, b, c in normal]
    lines += [f"{a:.6f},{b:.6f},{c:.6f},outlier" for a, b, c in outliers]
    write_file("blobs.csv", "\n".join(lines) + "\n")
    write_file("blobs.recipe", RECIPE)

    def config(name="run.conf", kind="vae", epochs=3, lr="0.01", scorers="tracinad,reconstruction", runs=1,
               out=None):
        out = out or str(tmp_path / "out")
        return write_file(name, CONFIG.format(kind=kind, epochs=epochs, lr=lr, scorers=scorers, runs=runs, out=out))

    return config


def test_prepare_from_recipe_is_reproducible(tmp_path, workspace, capsys):
    recipe = tmp_path / "blobs.recipe"
    assert main.main(["prepare", "--config", str(recipe), "--out", str(tmp_path / "a")]) == 0
    assert main.main(["prepare", "--config", str(recipe), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "split.bin").read_bytes() == (tmp_path / "b" / "split.bin").read_bytes()
    assert "train=20 val=26 d=3" in capsys.readouterr().out

    summary = json.loads((tmp_path / "a" / "split_summary.json").read_text())
    assert summary["train_rows"] == 20 and summary["anomalies"] == 6
    assert summary["config"]["name"] == "blobs"
    assert summary["version"] == version_string()


def test_prepare_train_evaluate(tmp_path, workspace):
    config = str(workspace())
    out = tmp_path / "out"
    assert main.main(["prepare", "--config", config]) == 0
    assert main.main(["train", "--config", config]) == 0
    assert (out / "checkpoints.bin").is_file()
    trace = pd.read_csv(out / "loss_trace.csv")
    assert trace["epoch"].tolist() == [1, 2, 3]

    assert main.main(["evaluate", "--config", config]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["epochs"] == 3
    assert summary["config"]["scorers"] == ["tracinad", "reconstruction"]
    assert set(summary["aggregate"]) == {"tracinad", "reconstruction"}
    assert summary["runs"][0]["checkpoints"] == 3
    scores = pd.read_csv(out / "run_0" / "scores_tracinad.csv")
    assert len(scores) == 26
    assert scores["flagged"].sum() == 6

    for artifact in (out / "loss_trace.json", out / "run_0" / "scores_tracinad.json"):
        sidecar = json.loads(artifact.read_text())
        assert sidecar["version"] == version_string()
        assert sidecar["config"]["learning_rate"] == 0.01
    assert json.loads((out / "run_0" / "scores_reconstruction.json").read_text())["scorer"] == "reconstruction"


def test_train_twice_gives_identical_stores(tmp_path, workspace):
    config = str(workspace())
    out = tmp_path / "out"
    main.main(["prepare", "--config", config])
    main.main(["train", "--config", config])
    first = (out / "checkpoints.bin").read_bytes()
    main.main(["train", "--config", config])
    assert (out / "checkpoints.bin").read_bytes() == first


def test_multi_run_evaluation_is_deterministic(tmp_path, workspace):
    config = str(workspace(runs=2, scorers="tracinad,self-influence"))
    assert main.main(["evaluate", "--config", config, "--out", str(tmp_path / "x")]) == 0
    assert main.main(["evaluate", "--config", config, "--out", str(tmp_path / "y")]) == 0
    x = (tmp_path / "x" / "summary.json").read_text()
    assert x == (tmp_path / "y" / "summary.json").read_text()
    summary = json.loads(x)
    assert [r["seed"] for r in summary["runs"]] == [0, 1]
    assert len(summary["aggregate"]["tracinad"]["f1s"]) == 2
    assert (tmp_path / "x" / "run_1" / "scores_self-influence.csv").is_file()


def test_deep_svdd_bench(tmp_path, workspace):
    vae = str(workspace("vae.conf", runs=2))
    dsvdd = str(workspace("dsvdd.conf", kind="dsvdd", scorers="tracinad,dsvdd-plain", runs=2))
    out = tmp_path / "bench"
    assert main.main(["bench", "--config", vae, "--config", dsvdd, "--out", str(out)]) == 0
    table = pd.read_csv(out / "bench.csv")
    assert table["config"].tolist() == ["vae", "vae", "dsvdd", "dsvdd"]
    assert table["scorer"].tolist() == ["tracinad", "reconstruction", "tracinad", "dsvdd-plain"]
    bench = json.loads((out / "bench.json").read_text())
    assert {c["paired"]["b"] for c in bench["configs"]} == {"reconstruction", "dsvdd-plain"}


def test_exit_codes(tmp_path, workspace):
    assert main.main(["prepare", "--config", str(tmp_path / "missing.recipe")]) == main.EXIT_DATA
    assert main.main(["evaluate", "--config", str(workspace("bad.conf", epochs=0))]) == main.EXIT_CONFIG
    assert main.main(["train", "--config", str(workspace("fresh.conf", out=str(tmp_path / "none")))]) == main.EXIT_DATA
    wrong_scorer = workspace("wrong.conf", kind="dsvdd", scorers="reconstruction")
    assert main.main(["evaluate", "--config", str(wrong_scorer)]) == main.EXIT_CONFIG
    diverging = workspace("diverge.conf", lr="1e150")
    assert main.main(["evaluate", "--config", str(diverging)]) == main.EXIT_NUMERIC


def test_usage_errors_exit_with_config_code(tmp_path):
    with pytest.raises(SystemExit) as info:
        main.main(["frobnicate"])
    assert info.value.code == main.EXIT_CONFIG


def test_bundled_configs_parse():
    for path in sorted((ROOT / "configs").glob("*.conf")):
        cfg = RunConfig.from_file(path)
        assert cfg.dataset.endswith(".recipe")
        assert len(cfg.scorers) == 2
    thyroid = RunConfig.from_file(ROOT / "configs" / "thyroid_vae.conf")
    assert (thyroid.epochs, thyroid.batch_size, thyroid.learning_rate, thyroid.checkpoint_step) == (250, 16, 1e-4, 10)
    assert (thyroid.subsample_size, thyroid.mc_samples, thyroid.runs) == (64, 8, 10)
    assert RunConfig.from_file(ROOT / "configs" / "thyroid_dsvdd.conf").runs == 50


def test_cli_seed_overrides_the_config(workspace):
    cfg = RunConfig.from_file(workspace(), seed=7)
    assert cfg.seed == 7
    assert cfg.train_config(2).seed == 9
    assert cfg.influence_config(2).seed == 9


def test_requirements_are_all_imported():
    modules = {"scikit-learn": "sklearn", "python-dotenv": "dotenv"}
    sources = "\n".join(p.read_text() for p in [*ROOT.glob("*.py"), *(ROOT / "tests").glob("*.py")])
    for line in (ROOT / "requirements.txt").read_text().split():
        package = line.split("==")[0]
        module = modules.get(package, package)
        assert f"import {module}" in sources or f"from {module}" in sources, package
