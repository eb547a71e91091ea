"""Batch front end: ``wellcast {synth,train,finetune,train-global,evaluate,predict}``.

Experiments are described by a JSON file; command-line flags override its
fields, which in turn override built-in defaults. Every command writes its
artifacts into an output directory, each file through a temporary file and
an atomic rename, and only after all computation has succeeded.

Exit status: 0 on success, 2 for configuration/contract errors, 3 for data
errors, 4 for numeric failures.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import dataio
from .dataio import DatasetSplits, FeatureSet, WellSeries
from .errors import ConfigError, DataError, WellcastError
from .metrics import MetricReport, evaluate
from .models import ARCHITECTURES, ModelConfig, build_model
from .training import Checkpoint, TrainConfig, fine_tune, train

logger = logging.getLogger("wellcast")

SPLITS = ("train", "validation", "test")


@dataclass
class WellSpec:
    id: str
    csv: str
    mapping: Optional[str] = None


@dataclass
class ExperimentConfig:
    mode: str = "single"
    target: str = "bhp"
    features: str = "full"
    architecture: str = "transformer"
    wells: List[WellSpec] = field(default_factory=list)
    window: int = 14
    model: Dict = field(default_factory=dict)
    train: Dict = field(default_factory=dict)
    output_dir: str = "wellcast-out"
    seed: int = 0
    source_checkpoint: Optional[str] = None
    synth: Dict = field(default_factory=dict)

    @property
    def feature_set(self) -> FeatureSet:
        return FeatureSet(self.features, self.target)

    def validate(self) -> None:
        if self.mode not in ("single", "global"):
            raise ConfigError(f"mode must be 'single' or 'global', got {self.mode!r}")
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.features == "reduced" and self.target != "bhp":
            raise ConfigError("the reduced feature set is only valid with target=bhp")
        self.feature_set
        if self.window < 1:
            raise ConfigError(f"window must be positive, got {self.window}")
        if self.mode == "global" and len(self.wells) < 2:
            raise ConfigError(f"global mode requires at least 2 wells, got {len(self.wells)}")

    def model_config(self, input_size: int) -> ModelConfig:
        defaults = {"architecture": self.architecture, "input_size": input_size,
                    "window": self.window, "seed": self.seed}
        if self.mode == "global":
            # larger pooled dataset: double width and feed-forward size
            defaults.update(d_model=64, d_ff=128)
        overrides = {k: v for k, v in self.model.items() if k not in ("architecture", "input_size", "window")}
        cfg = ModelConfig.from_dict({**defaults, **overrides})
        cfg.validate()
        return cfg

    def train_config(self) -> TrainConfig:
        cfg = TrainConfig.from_dict({"seed": self.seed, **self.train})
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict, base: Optional[Path] = None) -> "ExperimentConfig":
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        wells = []
        for i, w in enumerate(data.pop("wells", []) or []):
            if not isinstance(w, dict) or "csv" not in w:
                raise ConfigError(f"wells[{i}] needs at least a 'csv' entry")
            wells.append(WellSpec(
                id=str(w.get("id") or Path(w["csv"]).stem),
                csv=_resolve(w["csv"], base),
                mapping=_resolve(w["mapping"], base) if w.get("mapping") else None,
            ))
        cfg = cls(wells=wells, **data)
        cfg.output_dir = _resolve(cfg.output_dir, base)
        if cfg.source_checkpoint:
            cfg.source_checkpoint = _resolve(cfg.source_checkpoint, base)
        return cfg


def _resolve(path: str, base: Optional[Path]) -> str:
    p = Path(path)
    if not p.is_absolute() and base is not None:
        p = base / p
    return str(p.resolve())


# ---------------------------------------------------------------------------
# artifact helpers
# ---------------------------------------------------------------------------

def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_artifacts(out_dir: Path, artifacts: Dict[str, str]) -> None:
    for name, text in artifacts.items():
        atomic_write(out_dir / name, text)


def dump_json(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def predictions_csv(rows: Sequence[tuple]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["date", "actual", "predicted"])
    for date, actual, pred in rows:
        writer.writerow([date, repr(float(actual)), repr(float(pred))])
    return buf.getvalue()


def read_predictions(path: Path) -> tuple:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return (np.array([float(r["actual"]) for r in rows]), np.array([float(r["predicted"]) for r in rows]))


def emit_predictions(ckpt: Checkpoint, samples, split: str = "") -> List[tuple]:
    """``(date, actual, predicted)`` rows in physical units for a sample list."""
    if not samples:
        raise DataError(f"split {split or '?'} has no samples")
    if ckpt.scaler is None or ckpt.features is None:
        raise ConfigError("checkpoint carries no scaler/feature set")
    X, y = dataio.stack(samples)
    if X.shape[-1] != ckpt.model_config.input_size:
        raise ConfigError(
            f"samples have {X.shape[-1]} features but the checkpoint expects {ckpt.model_config.input_size}"
        )
    model = ckpt.build_model()
    target = ckpt.features.target
    pred = ckpt.scaler.inverse(target, model.predict(X))
    actual = ckpt.scaler.inverse(target, y)
    return [(str(np.datetime_as_string(s.date, unit="D")), a, p) for s, a, p in zip(samples, actual, pred)]


def _report(rows: Sequence[tuple]) -> MetricReport:
    return evaluate([r[2] for r in rows], [r[1] for r in rows])


def _log_lines(history: Sequence[dict]) -> str:
    return "".join(json.dumps(h, sort_keys=True) + "\n" for h in history)


def _load_well(spec: WellSpec, features: FeatureSet) -> WellSeries:
    required = [c for c in features.columns if c != "liquid_rate"]
    return dataio.load_series(spec.csv, spec.mapping, required=required, well_id=spec.id)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: ExperimentConfig, args) -> Dict[str, str]:
    opts = {"days": 500, "wells": 1, "coupling": 0.0, "lag": 0, "noise_seed": None, **cfg.synth}
    unknown = set(opts) - {"days", "wells", "coupling", "lag", "noise_seed"}
    if unknown:
        raise ConfigError(f"unknown synth settings: {sorted(unknown)}")
    series = dataio.generate_synthetic(cfg.seed, int(opts["days"]), int(opts["wells"]),
                                       float(opts["coupling"]), lag=int(opts["lag"]),
                                       noise_seed=opts["noise_seed"])
    artifacts = {}
    for s in series:
        buf = io.StringIO()
        dataio.write_series(s, buf)
        artifacts[f"{s.well_id}.csv"] = buf.getvalue()
    artifacts["synth.json"] = dump_json({"seed": cfg.seed, **opts})
    return artifacts


def _single_artifacts(ckpt: Checkpoint, splits: DatasetSplits, suffix: str = "") -> Dict[str, str]:
    artifacts = {}
    for split in SPLITS:
        rows = emit_predictions(ckpt, splits.get(split), split)
        artifacts[f"predictions.{split}{suffix}.csv"] = predictions_csv(rows)
        artifacts[f"metrics.{split}{suffix}.json"] = dump_json(_report(rows).to_json())
    return artifacts


def cmd_train(cfg: ExperimentConfig, args) -> Dict[str, str]:
    if len(cfg.wells) != 1:
        raise ConfigError(f"train needs exactly one well, got {len(cfg.wells)}")
    fs = cfg.feature_set
    series = _load_well(cfg.wells[0], fs)
    scaler, splits = dataio.prepare_well(series, fs, cfg.window)
    model = build_model(cfg.model_config(len(fs.features)))
    ckpt = train(model, splits, cfg.train_config())
    ckpt.scaler, ckpt.features, ckpt.well_ids = scaler, fs, [series.well_id]
    return {"checkpoint.json": ckpt.dumps(), "train.log.jsonl": _log_lines(ckpt.history),
            **_single_artifacts(ckpt, splits)}


def cmd_finetune(cfg: ExperimentConfig, args) -> Dict[str, str]:
    if not cfg.source_checkpoint:
        raise ConfigError("finetune needs a source checkpoint (source_checkpoint or --checkpoint)")
    if len(cfg.wells) != 1:
        raise ConfigError(f"finetune needs exactly one target well, got {len(cfg.wells)}")
    source = Checkpoint.load(cfg.source_checkpoint)
    if source.model_config.architecture != "transformer":
        raise ConfigError("transfer learning requires a transformer checkpoint")
    fs = cfg.feature_set
    if source.features is not None and source.features != fs:
        raise ConfigError(
            f"target feature set {fs.mode}/{fs.target} differs from the source "
            f"{source.features.mode}/{source.features.target}"
        )
    series = _load_well(cfg.wells[0], fs)
    scaler, splits = dataio.prepare_well(series, fs, source.model_config.window)
    ckpt = fine_tune(source, splits, cfg.train_config(), features=fs)
    ckpt.scaler, ckpt.features, ckpt.well_ids = scaler, fs, [series.well_id]
    return {"checkpoint.json": ckpt.dumps(), "train.log.jsonl": _log_lines(ckpt.history),
            **_single_artifacts(ckpt, splits)}


def cmd_train_global(cfg: ExperimentConfig, args) -> Dict[str, str]:
    if len(cfg.wells) < 2:
        raise ConfigError(f"train-global requires at least 2 wells, got {len(cfg.wells)}")
    fs = cfg.feature_set
    wells = [_load_well(w, fs) for w in cfg.wells]
    scaler, merged, per_well = dataio.prepare_global(wells, fs, cfg.window)
    model = build_model(cfg.model_config(len(fs.features) + len(wells)))
    ckpt = train(model, merged, cfg.train_config())
    ckpt.scaler, ckpt.features, ckpt.well_ids = scaler, fs, [w.well_id for w in wells]
    artifacts = {"checkpoint.json": ckpt.dumps(), "train.log.jsonl": _log_lines(ckpt.history)}
    for wid, splits in per_well.items():
        artifacts.update(_single_artifacts(ckpt, splits, f".{wid}"))
    return artifacts


def _checkpoint_samples(cfg: ExperimentConfig, args) -> tuple:
    path = args.checkpoint or cfg.source_checkpoint
    if not path:
        raise ConfigError("a checkpoint is required (--checkpoint)")
    ckpt = Checkpoint.load(path)
    if ckpt.features is None or ckpt.scaler is None:
        raise ConfigError("checkpoint carries no scaler/feature set")
    if len(cfg.wells) != 1:
        raise ConfigError(f"choose exactly one well, got {len(cfg.wells)}")
    spec = cfg.wells[0]
    series = _load_well(spec, ckpt.features)
    _, splits = dataio.prepare_well(series, ckpt.features, ckpt.model_config.window, scaler=ckpt.scaler)
    split = args.split or "test"
    samples = splits.get(split)
    if len(ckpt.well_ids) > 1:
        wid = args.well_id or spec.id
        if wid not in ckpt.well_ids:
            raise ConfigError(f"well {wid!r} is not one of the global model's wells {ckpt.well_ids}")
        samples = dataio.onehot_samples(samples, ckpt.well_ids.index(wid), len(ckpt.well_ids))
    return ckpt, samples, split


def cmd_evaluate(cfg: ExperimentConfig, args) -> Dict[str, str]:
    ckpt, samples, split = _checkpoint_samples(cfg, args)
    report = _report(emit_predictions(ckpt, samples, split))
    text = dump_json(report.to_json())
    sys.stdout.write(text)
    return {f"metrics.{split}.json": text}


def cmd_predict(cfg: ExperimentConfig, args) -> Dict[str, str]:
    ckpt, samples, split = _checkpoint_samples(cfg, args)
    return {f"predictions.{split}.csv": predictions_csv(emit_predictions(ckpt, samples, split))}


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "train-global": cmd_train_global,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wellcast", description="Well production forecasting experiments.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("-c", "--config", help="experiment JSON file")
    parser.add_argument("-o", "--output-dir")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--mode", choices=("single", "global"))
    parser.add_argument("--architecture", choices=ARCHITECTURES)
    parser.add_argument("--target", choices=("bhp", "liquid_rate"))
    parser.add_argument("--features", choices=("full", "reduced"))
    parser.add_argument("--window", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--learning-rate", type=float)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--well", action="append", metavar="CSV", help="well CSV (repeatable); replaces config wells")
    parser.add_argument("--mapping", help="column mapping JSON applied to every --well")
    parser.add_argument("--checkpoint", help="source checkpoint (finetune) or model to evaluate/predict")
    parser.add_argument("--well-id", help="well identity for evaluate/predict with a global checkpoint")
    parser.add_argument("--split", choices=SPLITS)
    parser.add_argument("--days", type=int)
    parser.add_argument("--wells", type=int, help="synth: number of wells")
    parser.add_argument("--coupling", type=float)
    parser.add_argument("--lag", type=int)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_config(args) -> ExperimentConfig:
    data: dict = {}
    base = Path.cwd()
    if args.config:
        path = Path(args.config)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        base = path.resolve().parent
    cfg = ExperimentConfig.from_dict(data, base)

    cwd = Path.cwd()
    for name in ("seed", "mode", "architecture", "target", "features", "window"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    if args.output_dir:
        cfg.output_dir = _resolve(args.output_dir, cwd)
    if args.well:
        mapping = _resolve(args.mapping, cwd) if args.mapping else None
        cfg.wells = [WellSpec(Path(p).stem, _resolve(p, cwd), mapping) for p in args.well]
    if args.checkpoint and args.command == "finetune":
        cfg.source_checkpoint = _resolve(args.checkpoint, cwd)
    for flag, key in (("epochs", "epochs"), ("learning_rate", "learning_rate"), ("batch_size", "batch_size")):
        value = getattr(args, flag)
        if value is not None:
            cfg.train = {**cfg.train, key: value}
    for flag in ("days", "wells", "coupling", "lag"):
        value = getattr(args, flag)
        if value is not None:
            cfg.synth = {**cfg.synth, flag: value}
    cfg.validate()
    return cfg


def resolved_config(cfg: ExperimentConfig, command: str) -> dict:
    """Defaults-resolved configuration echoed next to the artifacts."""
    data = cfg.to_dict()
    if command in ("train", "train-global", "finetune"):
        n_features = len(cfg.feature_set.features) + (len(cfg.wells) if cfg.mode == "global" else 0)
        model = cfg.model_config(n_features).to_dict()
        for key in ("architecture", "input_size", "window"):
            model.pop(key)
        data["model"] = model
        data["train"] = cfg.train_config().to_dict()
    return data


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "train" and cfg.mode == "global":
            raise ConfigError("mode=global needs the train-global command")
        if args.command == "train-global":
            cfg.mode = "global"
            cfg.validate()
        artifacts = COMMANDS[args.command](cfg, args)
        artifacts["config.resolved.json"] = dump_json(resolved_config(cfg, args.command))
        write_artifacts(Path(cfg.output_dir), artifacts)
    except WellcastError as exc:
        print(f"wellcast: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
