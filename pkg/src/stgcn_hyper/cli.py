"""Command line entry point: ``stgcn-hyper {synth,prepare,train,detect,evaluate}``.

A run configuration is a JSON file with up to five sections; flags given on
the command line override the file.  Unknown keys are rejected.

    {
      "seed": 0,
      "runs_dir": "runs",
      "data": {"label_column": "label", "timestamp_column": null,
               "require_labels": false, "split": [0.7, 0.15, 0.15]},
      "model": {... ModelConfig fields, with nested "tcn" and "mask" ...},
      "detector": {... DetectorConfig fields ...}
    }

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .dataio import (
    CHANNEL_KINDS,
    NormalizationState,
    SynthSpec,
    clean,
    load_csv,
    minmax_apply,
    minmax_fit,
    save_csv,
    split,
    synth_generate,
)
from .detectors import AnomalyReport
from .errors import ConfigError, DataError, StgcnError
from .evaluation import metrics_report, write_metrics
from .model import Checkpoint, ModelConfig, train
from .pipeline import DetectorConfig, run_detection

log = logging.getLogger("stgcn_hyper")

BUNDLE_FILES = ("train.csv", "val.csv", "test.csv", "norm_state.json", "bundle.json")


@dataclass
class DataConfig:
    label_column: str = "label"
    timestamp_column: str | None = None
    require_labels: bool = False
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def __post_init__(self):
        self.split = tuple(float(r) for r in self.split)


@dataclass
class RunConfig:
    seed: int = 0
    runs_dir: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "runs_dir": self.runs_dir,
            "data": asdict(self.data),
            "model": self.model.to_dict(),
            "detector": self.detector.to_dict(),
        }


def _strict(cls, body, where: str):
    if not isinstance(body, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(body) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**body)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_run_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        body = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    cfg = _strict(RunConfig, body, "config")
    cfg.data = _strict(DataConfig, body.get("data", {}), "data")
    cfg.model = ModelConfig.from_dict(body.get("model", {})) if "model" in body else ModelConfig()
    cfg.detector = _strict(DetectorConfig, body.get("detector", {}), "detector")
    return cfg


def _override(cfg: RunConfig, args) -> RunConfig:
    """Apply command-line flags on top of the file configuration (flags win)."""
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "runs_dir", None) is not None:
        cfg.runs_dir = args.runs_dir
    model = {}
    for flag, key in (("ablation", "ablation"), ("structure", "structure_mode"), ("epochs", "epochs"),
                      ("lr", "lr"), ("batch_size", "batch_size"), ("window", "window")):
        if getattr(args, flag, None) is not None:
            model[key] = getattr(args, flag)
    model["seed"] = cfg.seed
    cfg.model = replace(cfg.model, **model)
    det = {"seed": cfg.seed}
    for flag, key in (("detector", "kind"), ("threshold", "threshold"), ("k_mode", "k_mode"),
                      ("sliding_window", "sliding_window")):
        if getattr(args, flag, None) is not None:
            det[key] = getattr(args, flag)
    cfg.detector = replace(cfg.detector, **det)
    if getattr(args, "require_labels", False):
        cfg.data = replace(cfg.data, require_labels=True)
    if getattr(args, "label_column", None) is not None:
        cfg.data = replace(cfg.data, label_column=args.label_column)
    return cfg


def _write_json(path: Path, body) -> Path:
    path.write_text(json.dumps(body, indent=2) + "\n")
    return path


# -- subcommands --------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force:
        raise ConfigError(f"{out} exists; pass --force to overwrite")
    kinds = tuple(CHANNEL_KINDS[i % len(CHANNEL_KINDS)] for i in range(args.channels))
    spec = SynthSpec(
        length=args.length,
        channels=kinds,
        anomaly_rate=args.anomaly_rate,
        anomaly_start=args.anomaly_start,
    )
    ds = synth_generate(spec, args.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(ds, out)
    print(f"wrote {out}: {ds.length} rows, {ds.n_features} channels, {int(ds.labels.sum())} anomalous")
    return 0


def cmd_prepare(args) -> int:
    cfg = _override(load_run_config(args.config), args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise ConfigError(f"{out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    d = cfg.data
    ds = clean(load_csv(args.csv, d.label_column, d.timestamp_column, d.require_labels))
    need = cfg.model.window + cfg.model.horizon
    tr, va, te = split(ds, d.split, min_length=cfg.model.horizon + 1)
    if tr.length < need:
        raise ConfigError(f"train split has {tr.length} rows; needs at least {need}")
    state = minmax_fit(tr)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(("train", "val", "test"), (tr, va, te)):
        save_csv(minmax_apply(part, state), out / f"{name}.csv")
    state.save(out / "norm_state.json")
    _write_json(
        out / "bundle.json",
        {"source": Path(args.csv).name, "rows": {"train": tr.length, "val": va.length, "test": te.length},
         "features": ds.feature_names, "labels": ds.labels is not None},
    )
    print(f"prepared {out}: train {tr.length}, val {va.length}, test {te.length} rows")
    return 0


def _load_bundle(path):
    path = Path(path)
    missing = [f for f in BUNDLE_FILES if not (path / f).is_file()]
    if missing:
        raise DataError(f"{path} is not a prepared bundle (missing {', '.join(missing)})")
    parts = [load_csv(path / f"{n}.csv") for n in ("train", "val", "test")]
    return parts, NormalizationState.load(path / "norm_state.json")


def _run_dir(cfg: RunConfig, explicit) -> Path:
    if explicit:
        run = Path(explicit)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run = Path(cfg.runs_dir) / f"{stamp}_seed{cfg.seed}"
    run.mkdir(parents=True, exist_ok=True)
    return run


def cmd_train(args) -> int:
    cfg = _override(load_run_config(args.config), args)
    (tr, _, _), norm = _load_bundle(args.bundle)
    run = _run_dir(cfg, args.run_dir)
    _write_json(run / "config.json", cfg.to_dict())
    loss_path = run / "loss.csv"
    loss_path.write_text("epoch,loss\n")

    def on_epoch(epoch, value):
        with loss_path.open("a") as fh:
            fh.write(f"{epoch},{value!r}\n")
        log.info("epoch %d loss %.6g", epoch, value)

    ck = train(
        tr.values, cfg.model, tr.feature_names, norm,
        snapshot_dir=run / "laplacian", on_epoch=on_epoch,
    )
    ck.save(run / "checkpoint.ckpt")
    print(f"trained {cfg.model.ablation} for {cfg.model.epochs} epochs; run directory {run}")
    return 0


def cmd_detect(args) -> int:
    cfg = _override(load_run_config(args.config), args)
    (_, va, te), _ = _load_bundle(args.bundle)
    ck = Checkpoint.load(args.checkpoint)
    if ck.n_nodes != te.n_features:
        raise DataError(f"checkpoint has {ck.n_nodes} features, bundle has {te.n_features}")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    res = run_detection(va, te, ck, cfg.detector, threads=args.threads)
    stem = f"report_{cfg.detector.kind}"
    res.report.to_csv(out / f"{stem}.csv")
    summary = res.report.summary() | {
        "val_flags": int((res.val_scores > res.report.threshold).sum()),
        "detector_config": cfg.detector.to_dict(),
    }
    _write_json(out / f"{stem}.json", summary)
    print(f"{summary['n_anomalies']} of {summary['n_scored']} test steps flagged; report {out / stem}.csv")
    return 0


def _labels_from(path, label_column: str) -> np.ndarray:
    ds = load_csv(path, label_column=label_column, require_labels=True)
    return ds.labels


def cmd_evaluate(args) -> int:
    report = AnomalyReport.from_csv(args.report)
    labels = _labels_from(args.labels, args.label_column or "label")
    steps = report.timesteps
    if steps.size and steps.max() >= labels.size:
        raise DataError(
            f"report refers to step {int(steps.max())} but the label file has {labels.size} rows"
        )
    body = metrics_report(report.flags, labels[steps], report.threshold, adjust=args.point_adjust)
    out = Path(args.out) if args.out else Path(args.report).with_suffix(".metrics.json")
    write_metrics(body, out)
    print(f"precision {body['precision']:.4f} recall {body['recall']:.4f} f1 {body['f1']:.4f}")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stgcn-hyper", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a labeled synthetic CSV")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--length", type=int, default=20000)
    s.add_argument("--channels", type=int, default=5)
    s.add_argument("--anomaly-rate", type=float, default=0.05)
    s.add_argument("--anomaly-start", type=float, default=0.85,
                   help="fraction of the series kept anomaly-free (default keeps train/val clean)")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", help="clean, split and normalize a CSV into a bundle directory")
    s.add_argument("csv")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--label-column")
    s.add_argument("--require-labels", action="store_true")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train a forecaster on a bundle")
    s.add_argument("bundle")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--runs-dir")
    s.add_argument("--run-dir", help="explicit run directory instead of runs/<timestamp>_seed<seed>")
    s.add_argument("--ablation", choices=("full", "no_hyper", "no_tcn", "no_gcn", "no_mtcl"))
    s.add_argument("--structure", choices=("mtcl", "gsl"))
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--window", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("detect", help="fit a detector on validation errors and score the test split")
    s.add_argument("bundle")
    s.add_argument("checkpoint")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--detector", choices=("gmm", "pca"))
    s.add_argument("--threshold", help="'max' or 'quantile:q'")
    s.add_argument("--k-mode", choices=("bic", "f1"))
    s.add_argument("--sliding-window", type=int)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--out", help="output directory (default: next to the checkpoint)")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("evaluate", help="pointwise precision/recall/F1 of a report")
    s.add_argument("report")
    s.add_argument("--labels", required=True, help="CSV with a label column (e.g. bundle test.csv)")
    s.add_argument("--label-column")
    s.add_argument("--point-adjust", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    try:
        return args.func(args)
    except StgcnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
