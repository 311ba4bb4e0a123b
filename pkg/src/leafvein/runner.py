"""Pipeline stages over a run directory.

Layout of ``output_dir``::

    run_config.yaml  manifest.json  MANIFEST.sha  [FAILED]
    venation_cache/<species>/<image>.png          (input_mode = venation)
    <model_id>/model_config.json  <model_id>.best.ckpt  history.json
              predictions.csv  predictions_train.csv
              metrics.json  metrics_train.json  figures/fig_*.png
    report/summary.csv  report/summary.txt
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import report
from .config import RunConfig
from .dataset import TEST, TRAIN, DatasetManifest, scan_dataset, split_count, stratified_split
from .errors import ConfigError
from .metrics import PredictionMatrix, evaluate
from .models import ModelConfig, model_config
from .preprocess import enhance_file, venation_cache_path
from .training import apply_overrides, execute_plan, load_split, predict

log = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
CONFIG_SNAPSHOT = "run_config.yaml"
DIGEST_FILE = "MANIFEST.sha"
FAILED_MARKER = "FAILED"
PREDICTION_FILES = {TEST: "predictions.csv", TRAIN: "predictions_train.csv"}
METRICS_FILES = {TEST: "metrics.json", TRAIN: "metrics_train.json"}


@dataclass
class Diagnostics:
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def lines(self) -> list[str]:
        return ([f"ERROR  {e}" for e in self.errors] + [f"WARN   {w}" for w in self.warnings]
                + [f"OK     {n}" for n in self.notes])


def _writable(path: Path) -> bool:
    probe = path
    while not probe.exists():
        if probe.parent == probe:
            return False
        probe = probe.parent
    return probe.is_dir() and os.access(probe, os.W_OK | os.X_OK)


def validate(cfg: RunConfig) -> Diagnostics:
    diag = Diagnostics()
    if not cfg.dataset_root:
        diag.errors.append("dataset_root is not set (config key, --dataset-root or $VENATION_DATA_ROOT)")
    else:
        try:
            manifest = scan_dataset(cfg.dataset_root)
        except Exception as exc:
            diag.errors.append(str(exc))
        else:
            counts = manifest.class_counts()
            shape = f"{manifest.num_classes} classes × {counts[0]} images" if len(set(counts)) == 1 else (
                f"{manifest.num_classes} classes, {min(counts)}-{max(counts)} images per class")
            diag.notes.append(f"dataset {cfg.dataset_root}: {shape}, {len(manifest.records)} images")
            for name, n in zip(manifest.class_names, counts):
                n_test = split_count(n, cfg.test_fraction)
                if n_test < 1 or n - n_test < 1:
                    diag.errors.append(f"class {name!r} ({n} images) cannot be split at test_fraction={cfg.test_fraction}")
            diag.warnings.extend(manifest.warnings)
    out = cfg.out
    if out.exists() and not out.is_dir():
        diag.errors.append(f"output path is not a directory: {out}")
    elif not _writable(out):
        diag.errors.append(f"output directory is not writable: {out}")
    else:
        diag.notes.append(f"output directory {out} is writable")
    return diag


def _require_root(cfg: RunConfig) -> Path:
    if not cfg.dataset_root:
        raise ConfigError("dataset_root is not set (config key, --dataset-root or $VENATION_DATA_ROOT)")
    return Path(cfg.dataset_root)


def split(cfg: RunConfig) -> DatasetManifest:
    root = _require_root(cfg)
    manifest = stratified_split(scan_dataset(root), cfg.test_fraction, cfg.seed)
    cfg.out.mkdir(parents=True, exist_ok=True)
    manifest.save(cfg.out / MANIFEST_FILE)
    (cfg.out / CONFIG_SNAPSHOT).write_text(cfg.dumps(), encoding="utf-8")
    log.info("split %d images: %d train / %d test", len(manifest.records),
             len(manifest.split_records(TRAIN)), len(manifest.split_records(TEST)))
    return manifest


def load_manifest(cfg: RunConfig) -> DatasetManifest:
    path = cfg.out / MANIFEST_FILE
    if not path.exists():
        raise ConfigError(f"{path} not found; run the split stage first")
    return DatasetManifest.load(path, root=_require_root(cfg))


def venation_cache_dir(cfg: RunConfig) -> Path:
    return cfg.out / "venation_cache"


def prepare_venation_cache(cfg: RunConfig, manifest: DatasetManifest) -> Path:
    cache = venation_cache_dir(cfg)
    for rec in manifest.records:
        dst = venation_cache_path(cache, rec.path)
        if not dst.exists():
            enhance_file(manifest.abspath(rec), dst, cfg.venation)
    log.info("venation cache ready: %s", cache)
    return cache


def _model_config(cfg: RunConfig, model_id: str, num_classes: int) -> ModelConfig:
    mc = model_config(model_id, num_classes, cfg.pretrained)
    return apply_overrides(mc, cfg.epochs, cfg.batch_size, cfg.learning_rate)


def train(cfg: RunConfig, model_id: str, manifest: DatasetManifest | None = None) -> Path:
    """Train one model and write its checkpoint, history and predictions."""
    manifest = manifest or load_manifest(cfg)
    mc = _model_config(cfg, model_id, manifest.num_classes)
    run_dir = cfg.out / model_id
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {"seed": cfg.seed, **mc.to_dict()}
    (run_dir / "model_config.json").write_text(json.dumps(snapshot, indent=2) + "\n", encoding="utf-8")

    cache = venation_cache_dir(cfg) if cfg.input_mode == "venation" else None
    if cache is not None:
        prepare_venation_cache(cfg, manifest)
    size = mc.backbone.input_size[:2]
    train_data = load_split(manifest, TRAIN, mc.normalization, size, cfg.input_mode, cache)
    test_data = load_split(manifest, TEST, mc.normalization, size, cfg.input_mode, cache)

    model, _ = execute_plan(mc, manifest, run_dir, cfg.seed, cfg.input_mode, cache, data=(train_data, test_data))
    for split_name, data in ((TEST, test_data), (TRAIN, train_data)):
        pm = predict(model, data, manifest.class_names, mc.batch_size)
        pm.to_csv(run_dir / PREDICTION_FILES[split_name])
    return run_dir


def evaluate_run(run_dir, seed=None) -> dict:
    """predictions*.csv -> metrics*.json for one model directory."""
    run_dir = Path(run_dir)
    written = {}
    for split_name in (TEST, TRAIN):
        pred = run_dir / PREDICTION_FILES[split_name]
        if not pred.exists():
            if split_name == TEST:
                raise ConfigError(f"{pred} not found; train the model first")
            continue
        pm = PredictionMatrix.from_csv(pred)
        rep = evaluate(pm, meta={"model_id": run_dir.name, "split": split_name, "seed": seed})
        out = run_dir / METRICS_FILES[split_name]
        rep.save(out)
        written[split_name] = out
    return written


def report_runs(run_dirs, out_dir, svg: bool = False) -> dict:
    return report.build_report(run_dirs, out_dir, "svg" if svg else "png")


def write_digest(out_dir) -> Path:
    out_dir = Path(out_dir)
    lines = []
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name not in (DIGEST_FILE, FAILED_MARKER):
            h = hashlib.sha256(p.read_bytes()).hexdigest()
            lines.append(f"{h}  {p.relative_to(out_dir).as_posix()}")
    path = out_dir / DIGEST_FILE
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _train_and_evaluate(cfg: RunConfig, model_id: str) -> Path:
    run_dir = train(cfg, model_id)
    evaluate_run(run_dir, cfg.seed)
    report.render_figures(report.load_run(run_dir), run_dir / "figures", "svg" if cfg.svg else "png")
    return run_dir


def run(cfg: RunConfig) -> list[Path]:
    """split -> (venation cache) -> train -> evaluate -> report, per model."""
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    marker = out / FAILED_MARKER
    if marker.exists():
        marker.unlink()
    try:
        manifest = split(cfg)
        if cfg.input_mode == "venation":
            prepare_venation_cache(cfg, manifest)
        if cfg.parallel and len(cfg.model_ids) > 1:
            with ProcessPoolExecutor(max_workers=len(cfg.model_ids)) as pool:
                run_dirs = list(pool.map(_train_and_evaluate, [cfg] * len(cfg.model_ids), cfg.model_ids))
        else:
            run_dirs = [_train_and_evaluate(cfg, m) for m in cfg.model_ids]
        report_runs(run_dirs, out / "report", cfg.svg)
    except BaseException as exc:
        marker.write_text(f"{type(exc).__name__}: {exc}\n", encoding="utf-8")
        raise
    write_digest(out)
    return run_dirs
