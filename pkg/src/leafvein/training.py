"""Phased training with early stopping, plateau LR decay and best-weight restore."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import TEST, TRAIN, DatasetManifest, load_image
from .errors import ConfigError, DataError, NonFiniteLossError
from .metrics import PredictionMatrix
from .models import Classifier, ModelConfig, Phase, build_classifier, set_trainable_suffix
from .preprocess import NormalizationScheme, venation_cache_path

log = logging.getLogger(__name__)

CONTINUE, STOP = "continue", "stop"


# --- callback state machines -------------------------------------------------

@dataclass(frozen=True)
class EarlyStopState:
    patience: int
    epoch: int = 0
    best_loss: float = math.inf
    best_epoch: int = 0
    wait: int = 0


def early_stop_step(state: EarlyStopState, val_loss: float) -> tuple[EarlyStopState, str]:
    """Advance one epoch. Only a strict decrease of the running minimum counts."""
    epoch = state.epoch + 1
    if val_loss < state.best_loss:
        new = replace(state, epoch=epoch, best_loss=val_loss, best_epoch=epoch, wait=0)
    else:
        new = replace(state, epoch=epoch, wait=state.wait + 1)
    return new, STOP if new.wait >= new.patience else CONTINUE


@dataclass(frozen=True)
class PlateauState:
    lr: float
    factor: float = 0.5
    patience: int = 2
    min_lr: float = 1e-6
    best_loss: float = math.inf
    wait: int = 0


def plateau_step(state: PlateauState, val_loss: float) -> PlateauState:
    """Return the state (and learning rate) to use for the next epoch."""
    if val_loss < state.best_loss:
        return replace(state, best_loss=val_loss, wait=0)
    wait = state.wait + 1
    if wait >= state.patience:
        return replace(state, lr=max(state.lr * state.factor, state.min_lr), wait=0)
    return replace(state, wait=wait)


# --- history -----------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    train_accuracy: float
    val_accuracy: float
    learning_rate: float


@dataclass
class PhaseHistory:
    name: str
    max_epochs: int
    records: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def best_record(self) -> EpochRecord:
        return self.records[self.best_epoch - 1]


@dataclass
class TrainingHistory:
    phases: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def best_epoch(self) -> int:
        return self.phases[-1].best_epoch if self.phases else 0

    @property
    def stopped_early(self) -> bool:
        return self.phases[-1].stopped_early if self.phases else False

    def to_dict(self) -> dict:
        return {
            **self.meta,
            "phases": [
                {
                    "name": p.name,
                    "max_epochs": p.max_epochs,
                    "best_epoch": p.best_epoch,
                    "stopped_early": p.stopped_early,
                    "records": [asdict(r) for r in p.records],
                }
                for p in self.phases
            ],
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TrainingHistory":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        phases = [
            PhaseHistory(p["name"], p["max_epochs"], [EpochRecord(**r) for r in p["records"]],
                         p["best_epoch"], p["stopped_early"])
            for p in d.get("phases", [])
        ]
        meta = {k: v for k, v in d.items() if k not in ("phases", "best_epoch", "stopped_early")}
        return cls(phases, meta)


# --- data --------------------------------------------------------------------

@dataclass
class SplitData:
    """Decoded uint8 images (N x H x W x 3) with labels; normalised per batch."""

    images: torch.Tensor
    labels: torch.Tensor
    image_ids: list
    scheme: NormalizationScheme
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def normalized(self, idx) -> torch.Tensor:
        mean = torch.tensor(self.scheme.mean, dtype=torch.float32)
        scale = torch.tensor(self.scheme.scale, dtype=torch.float32)
        return (self.images[idx].to(torch.float32) - mean) / scale


def load_split(
    manifest: DatasetManifest,
    split: str,
    scheme: NormalizationScheme,
    size=(224, 224),
    input_mode: str = "raw_rgb",
    cache_root=None,
) -> SplitData:
    records = manifest.split_records(split)
    if not records:
        raise DataError(f"split {split!r} is empty")
    images = np.empty((len(records), size[0], size[1], 3), dtype=np.uint8)
    for i, rec in enumerate(records):
        if input_mode == "venation":
            if cache_root is None:
                raise ConfigError("venation input requires a populated venation cache")
            path = venation_cache_path(cache_root, rec.path)
        elif input_mode == "raw_rgb":
            path = manifest.abspath(rec)
        else:
            raise ConfigError(f"unknown input mode {input_mode!r}")
        images[i] = load_image(path, size)
    return SplitData(
        images=torch.from_numpy(images),
        labels=torch.tensor([r.class_index for r in records], dtype=torch.int64),
        image_ids=[r.path for r in records],
        scheme=scheme,
        num_classes=manifest.num_classes,
    )


@dataclass
class _FeatureData:
    features: torch.Tensor
    labels: torch.Tensor
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)


def _backbone_frozen(model: Classifier) -> bool:
    return not any(p.requires_grad for p in model.backbone.parameters())


@torch.no_grad()
def _pooled_features(model: Classifier, data: SplitData, batch_size: int) -> torch.Tensor:
    model.eval()
    out = [model.features(data.normalized(slice(i, i + batch_size))) for i in range(0, len(data), batch_size)]
    return torch.cat(out)


def _head_inputs(model, data, idx):
    if isinstance(data, _FeatureData):
        return model.head(data.features[idx])
    return model.logits(data.normalized(idx))


@torch.no_grad()
def _evaluate_loss(model: Classifier, data, batch_size: int) -> tuple[float, float]:
    model.eval()
    total_loss, correct = 0.0, 0
    for i in range(0, len(data), batch_size):
        idx = slice(i, i + batch_size)
        logits = _head_inputs(model, data, idx)
        y = data.labels[idx]
        total_loss += F.cross_entropy(logits, F.one_hot(y, data.num_classes).float(), reduction="sum").item()
        correct += int((logits.argmax(1) == y).sum())
    return total_loss / len(data), correct / len(data)


def _make_optimizer(phase: Phase, params):
    if phase.optimizer == "adam":
        return torch.optim.Adam(params, lr=phase.learning_rate)
    return torch.optim.SGD(params, lr=phase.learning_rate, momentum=phase.momentum)


def run_phase(
    model: Classifier,
    train: SplitData,
    val: SplitData,
    phase: Phase,
    batch_size: int = 32,
    seed: int = 0,
) -> tuple[Classifier, PhaseHistory]:
    """Optimise categorical cross-entropy for one phase.

    Trainability must already be configured. When the whole backbone is frozen
    the pooled backbone features are computed once and only the head is
    iterated; with batch-norm held in inference mode and no augmentation this
    is the same computation as running the full network every step.
    """
    if len(train) == 0 or len(val) == 0:
        raise DataError("training and validation data must be non-empty")
    if model.num_classes != train.num_classes:
        raise ConfigError(f"model has {model.num_classes} outputs, data has {train.num_classes} classes")

    if _backbone_frozen(model):
        train_d = _FeatureData(_pooled_features(model, train, batch_size), train.labels, train.num_classes)
        val_d = _FeatureData(_pooled_features(model, val, batch_size), val.labels, val.num_classes)
    else:
        train_d, val_d = train, val

    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = _make_optimizer(phase, params)
    gen = torch.Generator().manual_seed(seed)

    es = EarlyStopState(phase.early_stop.patience) if phase.early_stop else None
    plateau = (
        PlateauState(phase.learning_rate, phase.plateau.factor, phase.plateau.patience, phase.plateau.min_lr)
        if phase.plateau else None
    )
    history = PhaseHistory(phase.name, phase.max_epochs)
    best_state, best_loss = None, math.inf
    lr = phase.learning_rate

    for epoch in range(1, phase.max_epochs + 1):
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        order = torch.randperm(len(train_d), generator=gen)
        seen, loss_sum, correct = 0, 0.0, 0
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            logits = _head_inputs(model, train_d, idx)
            y = train_d.labels[idx]
            loss = F.cross_entropy(logits, F.one_hot(y, train_d.num_classes).float())
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"phase {phase.name!r} epoch {epoch}: loss is {loss.item()}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            seen += len(idx)
            loss_sum += loss.item() * len(idx)
            correct += int((logits.detach().argmax(1) == y).sum())

        val_loss, val_acc = _evaluate_loss(model, val_d, batch_size)
        if not math.isfinite(val_loss):
            raise NonFiniteLossError(f"phase {phase.name!r} epoch {epoch}: validation loss is {val_loss}")
        rec = EpochRecord(epoch, loss_sum / seen, val_loss, correct / seen, val_acc, lr)
        history.records.append(rec)
        log.info(
            "%s epoch %d/%d  loss %.4f acc %.4f  val_loss %.4f val_acc %.4f  lr %.2e",
            phase.name, epoch, phase.max_epochs, rec.train_loss, rec.train_accuracy, val_loss, val_acc, lr,
        )

        if val_loss < best_loss:
            best_loss = val_loss
            history.best_epoch = epoch
            if phase.early_stop and phase.early_stop.restore_best:
                best_state = copy.deepcopy(model.state_dict())
        if plateau is not None:
            plateau = plateau_step(plateau, val_loss)
            lr = plateau.lr
        if es is not None:
            es, decision = early_stop_step(es, val_loss)
            if decision == STOP and epoch < phase.max_epochs:
                history.stopped_early = True
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


def apply_overrides(config: ModelConfig, epochs: Optional[int] = None, batch_size: Optional[int] = None,
                    learning_rate: Optional[float] = None) -> ModelConfig:
    """Cap every phase's epochs, set the batch size, or set the first phase's learning rate."""
    phases = []
    for i, p in enumerate(config.plan.phases):
        changes = {}
        if epochs is not None:
            changes["max_epochs"] = int(epochs)
        if learning_rate is not None and i == 0:
            changes["learning_rate"] = float(learning_rate)
        phases.append(replace(p, **changes))
    plan = replace(config.plan, phases=tuple(phases))
    return replace(config, plan=plan, batch_size=int(batch_size) if batch_size else config.batch_size)


def execute_plan(
    config: ModelConfig,
    manifest: DatasetManifest,
    run_dir=None,
    seed: int = 0,
    input_mode: str = "raw_rgb",
    cache_root=None,
    data: Optional[tuple[SplitData, SplitData]] = None,
    model: Optional[Classifier] = None,
) -> tuple[Classifier, TrainingHistory]:
    """Run all phases in order; persist history and the best checkpoint to ``run_dir``."""
    if not any(r.split for r in manifest.records):
        raise ConfigError("manifest has no train/test assignment; run the split first")
    size = config.backbone.input_size[:2]
    if data is None:
        train = load_split(manifest, TRAIN, config.normalization, size, input_mode, cache_root)
        val = load_split(manifest, TEST, config.normalization, size, input_mode, cache_root)
    else:
        train, val = data
    if model is None:
        model = build_classifier(config, seed)

    history = TrainingHistory(meta={"seed": seed, "model_id": config.model_id, "input_mode": input_mode})
    for i, phase in enumerate(config.plan.phases):
        set_trainable_suffix(model, phase.trainable_backbone_units)
        model, ph = run_phase(model, train, val, phase, config.batch_size, seed + i)
        history.phases.append(ph)

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        history.save(run_dir / "history.json")
        try:
            torch.save(model.state_dict(), run_dir / f"{config.model_id}.best.ckpt")
        except OSError as exc:
            raise ConfigError(f"cannot write checkpoint into {run_dir}: {exc}") from exc
    return model, history


@torch.no_grad()
def predict(model: Classifier, data: SplitData, class_names, batch_size: int = 32) -> PredictionMatrix:
    if model.num_classes != len(class_names):
        raise ConfigError(f"model has {model.num_classes} outputs but {len(class_names)} classes are defined")
    model.eval()
    rows = [model(data.normalized(slice(i, i + batch_size))) for i in range(0, len(data), batch_size)]
    scores = torch.cat(rows).double().numpy()
    return PredictionMatrix(list(data.image_ids), data.labels.numpy().copy(), scores, list(class_names))


def evaluate_split(
    model: Classifier,
    manifest: DatasetManifest,
    split: str,
    scheme: NormalizationScheme,
    size=(224, 224),
    input_mode: str = "raw_rgb",
    cache_root=None,
    batch_size: int = 32,
) -> PredictionMatrix:
    data = load_split(manifest, split, scheme, size, input_mode, cache_root)
    return predict(model, data, manifest.class_names, batch_size)
