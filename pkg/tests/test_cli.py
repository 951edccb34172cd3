import json

import numpy as np
import pytest

from shapeuda import cli
from shapeuda import experiments as ex
from shapeuda.data.io import read_dataset, read_volume

TINY_CFG = """\
# tiny end-to-end configuration
size = 16
n_source_train = 3
n_source_test = 2
n_target_train = 3
n_target_test = 2
unet_depth = 2
unet_channels = (2, 4, 4)
source_iters = 3
vae_latent = 8
vae_channels = (2, 4, 4)
vae_iters = 3
adapt_iters = 2
disc_iters = 2
finetune_iters = 2
lambdas = (0.0, 1.0)
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    return root, str(cfg)


def run(*argv):
    return cli.cli_main([str(a) for a in argv])


def test_help_and_usage_errors(capsys):
    assert run("--help") == 0
    assert run() == cli.EXIT_USAGE
    assert run("no-such-command") == cli.EXIT_USAGE
    assert run("train-source", "--out", "x") == cli.EXIT_USAGE  # --data missing


def test_bad_config_is_usage_error(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("unknown_key = 3\n")
    assert run("gen-data", "--config", bad, "--out", tmp_path / "d") == cli.EXIT_USAGE


def test_missing_data_is_data_error(tmp_path, work):
    _, cfg = work
    assert run("train-source", "--config", cfg, "--data", tmp_path / "none", "--out", tmp_path / "o") == cli.EXIT_DATA


def test_corrupt_checkpoint_is_data_error(tmp_path, work):
    root, cfg = work
    (tmp_path / "ck").mkdir()
    assert run("predict", "--config", cfg, "--data", root / "data", "--model", tmp_path / "ck",
               "--out", tmp_path / "p") == cli.EXIT_DATA


@pytest.fixture(scope="module")
def pipeline_run(work):
    root, cfg = work
    assert run("gen-data", "--config", cfg, "--seed", 1, "--out", root / "data") == 0
    assert run("train-source", "--config", cfg, "--seed", 1, "--data", root / "data", "--out", root / "src") == 0
    assert run("train-vae", "--config", cfg, "--seed", 1, "--data", root / "data", "--out", root / "vae") == 0
    assert run("adapt", "--config", cfg, "--seed", 1, "--data", root / "data", "--source", root / "src",
               "--vae", root / "vae", "--dynamic", "--out", root / "student") == 0
    return root, cfg


def test_gen_data_layout(pipeline_run):
    root, _ = pipeline_run
    for split, n in zip(cli.SPLITS, (3, 2, 3, 2)):
        samples, manifest = read_dataset(root / "data", split)
        assert len(samples) == n
    _, tt = read_dataset(root / "data", "target_train")
    assert tt.get("labels_for_evaluation_only") is True
    m = json.loads((root / "data" / cli.RUN_MANIFEST).read_text())
    assert m["seed"] == 1 and m["command"] == "gen-data"


def test_adapt_outputs(pipeline_run):
    root, _ = pipeline_run
    log = (root / "student" / "adapt_log.csv").read_text(encoding="utf-8").splitlines()
    assert log[0] == "iter,L_recon,L_pseudo,λ_recon,total" and len(log) == 3
    assert json.loads((root / "student" / "model.json").read_text())["kind"] == "segnet"


def test_predict_and_eval(pipeline_run, tmp_path):
    root, cfg = pipeline_run
    common = ("--config", cfg, "--data", root / "data")
    assert run("predict", *common, "--model", root / "student", "--out", tmp_path / "plain") == 0
    assert run("predict", *common, "--model", root / "student", "--ttt", "--out", tmp_path / "t") == cli.EXIT_USAGE
    assert run("predict", *common, "--model", root / "student", "--ttt", "--source", root / "src",
               "--vae", root / "vae", "--out", tmp_path / "ttt") == 0
    preds = sorted(p.name for p in (tmp_path / "plain").iterdir())
    assert len(preds) == 2 and all(p.endswith(".msk.vuda") for p in preds)
    v = read_volume(tmp_path / "plain" / preds[0])
    assert set(np.unique(v.data)) <= {0.0, 1.0}
    assert run("eval", *common, "--pred", tmp_path / "plain", "--out", tmp_path / "ev") == 0
    rows = (tmp_path / "ev" / "eval.csv").read_text().splitlines()
    assert rows[0] == "method,mean_dice,domain_gap,n_cases" and rows[1].endswith(",2")
    (tmp_path / "plain" / preds[0]).unlink()
    assert run("eval", *common, "--pred", tmp_path / "plain", "--out", tmp_path / "ev2") == cli.EXIT_DATA


def test_numeric_failure_exit_code(pipeline_run, tmp_path, monkeypatch):
    root, cfg = pipeline_run

    def boom(*a, **k):
        raise FloatingPointError("nan")

    monkeypatch.setattr(cli, "adapt", boom)
    assert run("adapt", "--config", cfg, "--data", root / "data", "--source", root / "src", "--vae", root / "vae",
               "--out", tmp_path / "s") == cli.EXIT_NUMERIC


def test_table_commands_and_manifest_replay(pipeline_run, tmp_path, capsys):
    root, cfg = pipeline_run
    out = tmp_path / "abl"
    assert run("ablate", "--config", cfg, "--quiet", "--out", out) == 0
    assert (out / "ablation.csv").exists() and (out / "ablation.txt").exists()
    first = (out / "ablation.csv").read_bytes()
    # replaying from the saved manifest reproduces the table bit for bit
    out2 = tmp_path / "replay"
    assert run("ablate", "--config", out / cli.RUN_MANIFEST, "--quiet", "--out", out2) == 0
    assert (out2 / "ablation.csv").read_bytes() == first
    m = ex.RunManifest.load(out / cli.RUN_MANIFEST)
    assert m.command == "ablate" and set(m.metrics) >= {"direct_test", "dynamic_ttt"}


@pytest.mark.parametrize("command,name", [("sweep-lambda", "lambda_sweep.csv"), ("compare", "comparison.csv"),
                                          ("analyze-losses", "loss_scatter.svg")])
def test_other_experiment_commands(pipeline_run, tmp_path, command, name):
    _, cfg = pipeline_run
    assert run(command, "--config", cfg, "--quiet", "--out", tmp_path) == 0
    assert (tmp_path / name).exists()
