"""Backbone + classification-head configurations and the torch model builder."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field

import torch
from torch import nn
import torchvision

from .errors import ConfigError, WeightsUnavailableError
from .preprocess import NormalizationScheme, backbone_native, unit_scale

log = logging.getLogger(__name__)

ARCHITECTURES = ("resnet50", "mobilenet_v2", "efficientnet_b0")
POOLED_WIDTH = {"resnet50": 2048, "mobilenet_v2": 1280, "efficientnet_b0": 1280}


@dataclass(frozen=True)
class HeadSpec:
    num_classes: int
    dense_units: int = 256
    dropout_pre: float = 0.5
    dropout_post: float = 0.3

    def __post_init__(self):
        for rate in (self.dropout_pre, self.dropout_post):
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")


@dataclass(frozen=True)
class BackboneSpec:
    architecture_id: str
    pretrained: bool = True
    input_size: tuple = (224, 224, 3)
    frozen: bool = True

    def __post_init__(self):
        if self.architecture_id not in ARCHITECTURES:
            raise ConfigError(f"unknown backbone {self.architecture_id!r}; choose from {ARCHITECTURES}")


@dataclass(frozen=True)
class EarlyStopSpec:
    patience: int = 5
    restore_best: bool = True

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError(f"early-stop patience must be >= 1, got {self.patience}")


@dataclass(frozen=True)
class PlateauSpec:
    factor: float = 0.5
    patience: int = 2
    min_lr: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ConfigError(f"plateau factor must lie in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ConfigError(f"plateau patience must be >= 1, got {self.patience}")


@dataclass(frozen=True)
class Phase:
    """One optimisation phase.

    ``trainable_backbone_units`` is how many parameterised backbone units,
    counted from the output end, are unfrozen for this phase.
    """

    name: str
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.0
    max_epochs: int = 15
    early_stop: EarlyStopSpec | None = field(default_factory=EarlyStopSpec)
    plateau: PlateauSpec | None = None
    trainable_backbone_units: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")


@dataclass(frozen=True)
class TrainPlan:
    phases: tuple

    def __post_init__(self):
        if not self.phases:
            raise ConfigError("a training plan needs at least one phase")


@dataclass(frozen=True)
class ModelConfig:
    model_id: str
    backbone: BackboneSpec
    head: HeadSpec
    normalization: NormalizationScheme
    plan: TrainPlan
    batch_size: int = 32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["normalization"] = self.normalization.to_dict()
        d["backbone"]["input_size"] = list(self.backbone.input_size)
        d["plan"]["phases"] = [asdict(p) for p in self.plan.phases]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        phases = []
        for p in d["plan"]["phases"]:
            p = dict(p)
            p["early_stop"] = EarlyStopSpec(**p["early_stop"]) if p.get("early_stop") else None
            p["plateau"] = PlateauSpec(**p["plateau"]) if p.get("plateau") else None
            phases.append(Phase(**p))
        bb = dict(d["backbone"])
        bb["input_size"] = tuple(bb["input_size"])
        return cls(
            model_id=d["model_id"],
            backbone=BackboneSpec(**bb),
            head=HeadSpec(**d["head"]),
            normalization=NormalizationScheme.from_dict(d["normalization"]),
            plan=TrainPlan(tuple(phases)),
            batch_size=int(d["batch_size"]),
        )


def _check_k(num_classes: int) -> None:
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")


def resnet50_config(num_classes: int, pretrained: bool = True) -> ModelConfig:
    _check_k(num_classes)
    return ModelConfig(
        model_id="resnet50",
        backbone=BackboneSpec("resnet50", pretrained),
        head=HeadSpec(num_classes, dense_units=256),
        normalization=backbone_native("resnet50"),
        plan=TrainPlan((Phase("head", "adam", 1e-3, max_epochs=15, early_stop=EarlyStopSpec(5, True)),)),
    )


def mobilenet_v2_config(num_classes: int, pretrained: bool = True) -> ModelConfig:
    _check_k(num_classes)
    return ModelConfig(
        model_id="mobilenet_v2",
        backbone=BackboneSpec("mobilenet_v2", pretrained),
        head=HeadSpec(num_classes, dense_units=128),
        normalization=unit_scale(),
        plan=TrainPlan((Phase("head", "adam", 1e-3, max_epochs=30, early_stop=EarlyStopSpec(5, True)),)),
    )


def efficientnet_b0_config(num_classes: int, pretrained: bool = True) -> ModelConfig:
    _check_k(num_classes)
    head_phase = Phase(
        "head", "adam", 1e-3, max_epochs=10,
        early_stop=EarlyStopSpec(5, True), plateau=PlateauSpec(0.5, 2, 1e-6),
    )
    finetune = Phase(
        "finetune", "sgd", 1e-4, momentum=0.9, max_epochs=20,
        early_stop=EarlyStopSpec(5, True), trainable_backbone_units=10,
    )
    return ModelConfig(
        model_id="efficientnet_b0",
        backbone=BackboneSpec("efficientnet_b0", pretrained),
        head=HeadSpec(num_classes, dense_units=256),
        normalization=backbone_native("efficientnet_b0"),
        plan=TrainPlan((head_phase, finetune)),
    )


CONFIG_FACTORIES = {
    "resnet50": resnet50_config,
    "mobilenet_v2": mobilenet_v2_config,
    "efficientnet_b0": efficientnet_b0_config,
}


def model_config(model_id: str, num_classes: int, pretrained: bool = True) -> ModelConfig:
    try:
        factory = CONFIG_FACTORIES[model_id]
    except KeyError:
        raise ConfigError(f"unknown model {model_id!r}; choose from {tuple(CONFIG_FACTORIES)}") from None
    return factory(num_classes, pretrained)


def _torchvision_backbone(arch: str, pretrained: bool) -> nn.Module:
    builders = {
        "resnet50": (torchvision.models.resnet50, "ResNet50_Weights"),
        "mobilenet_v2": (torchvision.models.mobilenet_v2, "MobileNet_V2_Weights"),
        "efficientnet_b0": (torchvision.models.efficientnet_b0, "EfficientNet_B0_Weights"),
    }
    fn, weights_enum = builders[arch]
    weights = getattr(torchvision.models, weights_enum).IMAGENET1K_V1 if pretrained else None
    try:
        net = fn(weights=weights)
    except Exception as exc:  # network, hash or cache failures all surface differently
        raise WeightsUnavailableError(
            f"could not load ImageNet weights for {arch}: {exc}. Download {weights.url} "
            f"into $TORCH_HOME/hub/checkpoints (default ~/.cache/torch/hub/checkpoints) "
            f"or disable pretrained weights (--no-pretrained)."
        ) from exc
    if arch == "resnet50":
        return nn.Sequential(*list(net.children())[:-2])
    return net.features


class Classifier(nn.Module):
    """Backbone without its classifier top, followed by the custom head.

    ``forward`` takes a channels-last batch ``B x H x W x 3`` (the layout
    produced by :func:`normalize_for_model`) and returns class probabilities.
    """

    def __init__(self, backbone: nn.Module, head: HeadSpec, pooled_width: int):
        super().__init__()
        self.backbone = backbone
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Sequential(
            nn.Dropout(head.dropout_pre),
            nn.Linear(pooled_width, head.dense_units),
            nn.ReLU(),
            nn.Dropout(head.dropout_post),
            nn.Linear(head.dense_units, head.num_classes),
        )
        self.num_classes = head.num_classes

    def features(self, x: torch.Tensor) -> torch.Tensor:
        x = x.permute(0, 3, 1, 2).contiguous()
        return torch.flatten(self.pool(self.backbone(x)), 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)

    def train(self, mode: bool = True):
        super().train(mode)
        # batch-norm of frozen backbone units keeps its ImageNet statistics
        if mode:
            for m in self.backbone.modules():
                if isinstance(m, nn.modules.batchnorm._BatchNorm):
                    if not any(p.requires_grad for p in m.parameters(recurse=False)):
                        m.eval()
        return self


def build_classifier(config: ModelConfig, seed: int = 0) -> Classifier:
    arch = config.backbone.architecture_id
    if config.head.num_classes < 2:
        raise ConfigError("head must have at least 2 outputs")
    torch.manual_seed(seed)
    backbone = _torchvision_backbone(arch, config.backbone.pretrained)
    width = POOLED_WIDTH[arch]
    backbone.eval()
    with torch.no_grad():
        h, w, c = config.backbone.input_size
        probe = backbone(torch.zeros(1, c, min(h, 64), min(w, 64)))
    if probe.shape[1] != width:
        raise ConfigError(f"{arch} backbone yields {probe.shape[1]} channels, head expects {width}")
    # head initialisation depends only on the seed, not on how many draws the backbone used
    torch.manual_seed(seed)
    model = Classifier(backbone, config.head, width)
    set_trainable_suffix(model, 0 if config.backbone.frozen else len(backbone_units(model)))
    model.eval()
    return model


def backbone_units(model: Classifier) -> list[nn.Module]:
    """Backbone modules that directly own parameters, in forward order."""
    return [m for m in model.backbone.modules() if any(True for _ in m.parameters(recurse=False))]


def set_trainable_suffix(model: Classifier, n: int) -> Classifier:
    units = backbone_units(model)
    if not 0 <= n <= len(units):
        raise ValueError(f"cannot unfreeze {n} units; backbone has {len(units)}")
    for p in model.backbone.parameters():
        p.requires_grad_(False)
    for unit in units[len(units) - n:]:
        for p in unit.parameters(recurse=False):
            p.requires_grad_(True)
    for p in model.head.parameters():
        p.requires_grad_(True)
    return model


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


def head_parameter_count(pooled_width: int, head: HeadSpec) -> int:
    return pooled_width * head.dense_units + head.dense_units + head.dense_units * head.num_classes + head.num_classes


def state_checksum(module: nn.Module, only_frozen: bool = False) -> str:
    """SHA-256 over parameters and buffers.

    With ``only_frozen`` every submodule owning a trainable parameter is left
    out, buffers included, so the digest covers exactly the frozen state.
    """
    digest = hashlib.sha256()
    for mod_name, mod in module.named_modules():
        own = list(mod.named_parameters(recurse=False)) + list(mod.named_buffers(recurse=False))
        if only_frozen and any(p.requires_grad for p in mod.parameters(recurse=False)):
            continue
        for name, tensor in own:
            digest.update(f"{mod_name}.{name}".encode())
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
