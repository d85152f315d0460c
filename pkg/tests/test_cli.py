import json

import numpy as np
import pytest

from stgcn_hyper.cli import load_run_config, main
from stgcn_hyper.errors import ConfigError

SMALL = {
    "seed": 3,
    "model": {
        "window": 8,
        "epochs": 1,
        "lr": 0.01,
        "batch_size": 64,
        "spatial_channels": 8,
        "mlp_widths": [8],
        "embed_dim": 4,
        "tcn": {"layers": 1, "kernel_sizes": [2, 3], "conv_channels": 4,
                "residual_channels": 4, "skip_channels": 4},
    },
}


@pytest.fixture
def workspace(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(SMALL))
    data = tmp_path / "d.csv"
    assert main(["synth", "--out", str(data), "--seed", "7", "--length", "1500",
                 "--anomaly-rate", "0.02"]) == 0
    bundle = tmp_path / "bundle"
    assert main(["prepare", str(data), "--out", str(bundle), "--config", str(cfg),
                 "--require-labels"]) == 0
    return tmp_path, cfg, data, bundle


def test_synth_is_byte_identical_and_shaped(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["synth", "--out", str(a), "--seed", "7", "--length", "20000"]) == 0
    assert main(["synth", "--out", str(b), "--seed", "7", "--length", "20000"]) == 0
    assert a.read_bytes() == b.read_bytes()
    header = a.read_text().splitlines()[0].split(",")
    assert len(header) == 6 and header[-1] == "label"


def test_synth_rejects_bad_rate(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "x.csv"), "--anomaly-rate", "0.9"]) == 2
    assert "anomaly rate" in capsys.readouterr().err


def test_prepare_outputs_and_refusal(workspace):
    tmp, cfg, data, bundle = workspace
    names = {p.name for p in bundle.iterdir()}
    assert {"train.csv", "val.csv", "test.csv", "norm_state.json", "bundle.json"} <= names
    assert main(["prepare", str(data), "--out", str(bundle)]) == 2
    assert main(["prepare", str(data), "--out", str(bundle), "--force"]) == 0


def test_prepare_missing_labels_is_config_error(tmp_path):
    p = tmp_path / "n.csv"
    p.write_text("a,b\n" + "".join(f"{i},{i}\n" for i in range(100)))
    assert main(["prepare", str(p), "--out", str(tmp_path / "o"), "--require-labels"]) == 2


def test_prepare_bad_csv_is_data_error(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("")
    assert main(["prepare", str(p), "--out", str(tmp_path / "o")]) == 3


def test_train_detect_evaluate(workspace):
    tmp, cfg, _, bundle = workspace
    run = tmp / "run"
    assert main(["train", str(bundle), "--config", str(cfg), "--run-dir", str(run)]) == 0
    assert (run / "checkpoint.ckpt").is_file()
    assert (run / "loss.csv").read_text().startswith("epoch,loss\n1,")
    assert (run / "laplacian" / "laplacian_epoch1.csv").is_file()
    saved = json.loads((run / "config.json").read_text())
    assert saved["model"]["seed"] == 3 and saved["model"]["epochs"] == 1

    for det in ("gmm", "pca"):
        assert main(["detect", str(bundle), str(run / "checkpoint.ckpt"), "--config", str(cfg),
                     "--detector", det]) == 0
    gmm_lines = (run / "report_gmm.csv").read_text().splitlines()
    pca_lines = (run / "report_pca.csv").read_text().splitlines()
    assert gmm_lines[0] == pca_lines[0] and len(gmm_lines) == len(pca_lines)
    summary = json.loads((run / "report_gmm.json").read_text())
    assert summary["val_flags"] == 0

    assert main(["evaluate", str(run / "report_gmm.csv"), "--labels", str(bundle / "test.csv")]) == 0
    metrics = json.loads((run / "report_gmm.metrics.json").read_text())
    assert {"precision", "recall", "f1", "threshold", "n_anomalies"} <= set(metrics)


def test_flags_override_config(workspace):
    tmp, cfg, _, bundle = workspace
    run = tmp / "r0"
    assert main(["train", str(bundle), "--config", str(cfg), "--run-dir", str(run),
                 "--epochs", "0", "--ablation", "no_gcn", "--structure", "gsl"]) == 0
    saved = json.loads((run / "config.json").read_text())
    assert saved["model"]["epochs"] == 0 and saved["model"]["ablation"] == "no_gcn"
    assert saved["model"]["structure_mode"] == "gsl"


def test_default_run_dir_names_timestamp_and_seed(workspace):
    tmp, cfg, _, bundle = workspace
    assert main(["train", str(bundle), "--config", str(cfg), "--epochs", "0",
                 "--runs-dir", str(tmp / "runs")]) == 0
    (run,) = (tmp / "runs").iterdir()
    assert run.name.endswith("_seed3")


def test_detect_missing_checkpoint(workspace):
    tmp, cfg, _, bundle = workspace
    assert main(["detect", str(bundle), str(tmp / "nope.ckpt")]) == 3


def test_evaluate_examples(tmp_path):
    labels = tmp_path / "labels.csv"
    labels.write_text("x,label\n" + "".join(f"0,{v}\n" for v in [0, 1, 1, 0]))
    perfect = tmp_path / "perfect.csv"
    perfect.write_text("timestep,score,threshold,flag,top_feature\n"
                       + "".join(f"{t},{f},0.5,{f},\n" for t, f in enumerate([0, 1, 1, 0])))
    assert main(["evaluate", str(perfect), "--labels", str(labels), "--out", str(tmp_path / "m.json")]) == 0
    assert json.loads((tmp_path / "m.json").read_text())["f1"] == 1.0

    empty = tmp_path / "empty.csv"
    empty.write_text("timestep,score,threshold,flag,top_feature\n")
    assert main(["evaluate", str(empty), "--labels", str(labels), "--out", str(tmp_path / "e.json")]) == 0
    body = json.loads((tmp_path / "e.json").read_text())
    assert (body["precision"], body["recall"], body["f1"]) == (0.0, 0.0, 0.0)

    long = tmp_path / "long.csv"
    long.write_text("timestep,score,threshold,flag,top_feature\n"
                    + "".join(f"{t},0,0.5,0,\n" for t in range(10)))
    assert main(["evaluate", str(long), "--labels", str(labels)]) == 3


def test_config_rejects_unknown_keys(tmp_path):
    for body in ({"sed": 1}, {"model": {"windw": 3}}, {"detector": {"kind": "gmm", "x": 1}},
                 {"model": {"tcn": {"layer": 2}}}):
        p = tmp_path / "c.json"
        p.write_text(json.dumps(body))
        with pytest.raises(ConfigError):
            load_run_config(p)


def test_divergence_exits_four_and_keeps_partial_log(workspace):
    tmp, cfg, _, bundle = workspace
    body = json.loads(cfg.read_text())
    body["model"].update(lr=1e12, grad_clip=0.0, epochs=3, momentum=0.99)
    bad = tmp / "bad.json"
    bad.write_text(json.dumps(body))
    run = tmp / "diverge"
    assert main(["train", str(bundle), "--config", str(bad), "--run-dir", str(run)]) == 4
    assert (run / "loss.csv").read_text().startswith("epoch,loss\n")
    assert not (run / "checkpoint.ckpt").exists()
