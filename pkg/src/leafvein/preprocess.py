"""Venation enhancement chain and model input normalisation.

The chain is grayscale -> median -> Sobel -> gradient magnitude -> complement.
All stages are pure functions over uint8 arrays; only the Sobel responses are
signed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .dataset import IMAGE_EXTENSIONS
from .errors import ConfigError

log = logging.getLogger(__name__)

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.int64)
SOBEL_Y = SOBEL_X.T.copy()

# ImageNet statistics on the 0..255 scale.
IMAGENET_MEAN_255 = (123.675, 116.28, 103.53)
IMAGENET_STD_255 = (58.395, 57.12, 57.375)
# Per-channel centering means (RGB order, 0..255).
CHANNEL_CENTER_MEANS = (123.68, 116.779, 103.939)

MAGNITUDE_MODES = ("euclidean", "absolute_sum")


@dataclass(frozen=True)
class VenationConfig:
    median_kernel: int = 3
    magnitude_mode: str = "euclidean"

    def __post_init__(self):
        if self.median_kernel < 3 or self.median_kernel % 2 == 0:
            raise ConfigError(f"median_kernel must be an odd integer >= 3, got {self.median_kernel}")
        if self.magnitude_mode not in MAGNITUDE_MODES:
            raise ConfigError(f"magnitude_mode must be one of {MAGNITUDE_MODES}, got {self.magnitude_mode!r}")


class Scheme(str, Enum):
    UNIT_SCALE = "UNIT_SCALE"
    CHANNEL_CENTER = "CHANNEL_CENTER"
    BACKBONE_NATIVE = "BACKBONE_NATIVE"


@dataclass(frozen=True)
class NormalizationScheme:
    """Per-channel affine map ``(v - mean) / scale`` applied to 0..255 input."""

    scheme_id: Scheme
    mean: tuple = (0.0, 0.0, 0.0)
    scale: tuple = (1.0, 1.0, 1.0)
    architecture_id: str | None = None

    def to_dict(self) -> dict:
        return {
            "scheme_id": self.scheme_id.value,
            "mean": list(self.mean),
            "scale": list(self.scale),
            "architecture_id": self.architecture_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationScheme":
        return cls(Scheme(d["scheme_id"]), tuple(d["mean"]), tuple(d["scale"]), d.get("architecture_id"))


def unit_scale() -> NormalizationScheme:
    return NormalizationScheme(Scheme.UNIT_SCALE, (0.0, 0.0, 0.0), (255.0, 255.0, 255.0))


def channel_center(means=CHANNEL_CENTER_MEANS) -> NormalizationScheme:
    return NormalizationScheme(Scheme.CHANNEL_CENTER, tuple(means), (1.0, 1.0, 1.0))


def backbone_native(architecture_id: str) -> NormalizationScheme:
    # torchvision ImageNet checkpoints for all three backbones share one convention.
    if architecture_id not in ("resnet50", "mobilenet_v2", "efficientnet_b0"):
        raise ConfigError(f"no published input convention for backbone {architecture_id!r}")
    return NormalizationScheme(Scheme.BACKBONE_NATIVE, IMAGENET_MEAN_255, IMAGENET_STD_255, architecture_id)


def _check_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {img.shape}")
    return img


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {rgb.shape}")
    r, g, b = (rgb[:, :, i].astype(np.float64) for i in range(3))
    y = LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b
    return np.clip(np.rint(y), 0, 255).astype(np.uint8)


def median_filter(gray: np.ndarray, kernel: int = 3) -> np.ndarray:
    """Square median filter with edge-replicated borders."""
    gray = _check_gray(gray)
    if kernel < 3 or kernel % 2 == 0:
        raise ValueError(f"median kernel must be odd and >= 3, got {kernel}")
    if gray.shape[0] < kernel or gray.shape[1] < kernel:
        raise ValueError(f"image {gray.shape} smaller than the {kernel}x{kernel} kernel")
    r = kernel // 2
    padded = np.pad(gray, r, mode="edge")
    windows = sliding_window_view(padded, (kernel, kernel)).reshape(gray.shape + (kernel * kernel,))
    # odd window size: the median is the middle order statistic, exact in uint8
    mid = kernel * kernel // 2
    return np.partition(windows, mid, axis=-1)[..., mid].astype(np.uint8)


def _correlate3(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    padded = np.pad(img.astype(np.int64), 1, mode="edge")
    h, w = img.shape
    out = np.zeros((h, w), dtype=np.int64)
    for dy in range(3):
        for dx in range(3):
            if k[dy, dx]:
                out += k[dy, dx] * padded[dy:dy + h, dx:dx + w]
    return out


def sobel_gradients(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Signed horizontal and vertical Sobel responses.

    Kernels are applied as cross-correlation (the usual image-library
    convention), so a dark-to-bright transition left to right gives Gx > 0.
    """
    gray = _check_gray(gray)
    return _correlate3(gray, SOBEL_X), _correlate3(gray, SOBEL_Y)


def gradient_magnitude(gx: np.ndarray, gy: np.ndarray, mode: str = "euclidean") -> np.ndarray:
    gx = np.asarray(gx, dtype=np.float64)
    gy = np.asarray(gy, dtype=np.float64)
    if gx.shape != gy.shape:
        raise ValueError(f"gradient shapes differ: {gx.shape} vs {gy.shape}")
    if mode == "euclidean":
        m = np.hypot(gx, gy)
    elif mode == "absolute_sum":
        m = np.abs(gx) + np.abs(gy)
    else:
        raise ValueError(f"unknown magnitude mode {mode!r}")
    peak = m.max() if m.size else 0.0
    if peak <= 0:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.clip(np.rint(m * (255.0 / peak)), 0, 255).astype(np.uint8)


def complement(gray: np.ndarray) -> np.ndarray:
    gray = _check_gray(gray)
    return (255 - gray.astype(np.int16)).astype(np.uint8)


def venation_stages(rgb: np.ndarray, config: VenationConfig = VenationConfig()) -> dict[str, np.ndarray]:
    """Run the chain and keep every intermediate (useful for stage dumps)."""
    gray = to_grayscale(rgb)
    med = median_filter(gray, config.median_kernel)
    gx, gy = sobel_gradients(med)
    mag = gradient_magnitude(gx, gy, config.magnitude_mode)
    return {
        "grayscale": gray,
        "median": med,
        "sobel_x": gx,
        "sobel_y": gy,
        "magnitude": mag,
        "complement": complement(mag),
    }


def venation_pipeline(rgb: np.ndarray, config: VenationConfig = VenationConfig()) -> np.ndarray:
    return venation_stages(rgb, config)["complement"]


def to_three_channels(gray: np.ndarray) -> np.ndarray:
    gray = _check_gray(gray)
    return np.repeat(gray[:, :, None], 3, axis=2)


def normalize_for_model(image: np.ndarray, scheme: NormalizationScheme) -> np.ndarray:
    """Map a uint8 ``H x W x 3`` image to a float32 tensor of the same layout."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {image.shape}")
    if not isinstance(scheme, NormalizationScheme) or not isinstance(scheme.scheme_id, Scheme):
        raise ConfigError(f"unknown normalization scheme {scheme!r}")
    mean = np.asarray(scheme.mean, dtype=np.float32)
    scale = np.asarray(scheme.scale, dtype=np.float32)
    return ((image.astype(np.float32) - mean) / scale).astype(np.float32)


def _stage_to_uint8(name: str, arr: np.ndarray) -> np.ndarray:
    if name.startswith("sobel"):
        # signed field -> visible image
        a = np.abs(arr).astype(np.float64)
        peak = a.max()
        return np.zeros(a.shape, np.uint8) if peak == 0 else np.rint(a * 255.0 / peak).astype(np.uint8)
    return arr


def enhance_file(src: Path, dst: Path, config: VenationConfig, stage_dir: Path | None = None) -> None:
    with Image.open(src) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    stages = venation_stages(rgb, config)
    dst.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(stages["complement"], "L").save(dst, format="PNG")
    if stage_dir is not None:
        stage_dir.mkdir(parents=True, exist_ok=True)
        Image.fromarray(rgb, "RGB").save(stage_dir / "0_rgb.png")
        for i, (name, arr) in enumerate(stages.items(), start=1):
            Image.fromarray(_stage_to_uint8(name, arr), "L").save(stage_dir / f"{i}_{name}.png")


def preprocess_directory(src_root, dst_root, config: VenationConfig = VenationConfig(), stage_dir=None) -> list[Path]:
    """Mirror ``src_root`` into ``dst_root`` as enhanced PNGs, returning the outputs."""
    src_root, dst_root = Path(src_root), Path(dst_root)
    if not src_root.is_dir():
        raise ConfigError(f"input directory does not exist: {src_root}")
    outputs = []
    sources = sorted(p for p in src_root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
    for src in sources:
        rel = src.relative_to(src_root)
        dst = (dst_root / rel).with_suffix(".png")
        sdir = Path(stage_dir) / rel.with_suffix("") if stage_dir is not None else None
        try:
            enhance_file(src, dst, config, sdir)
        except OSError as exc:
            log.warning("skipping %s: %s", src, exc)
            continue
        outputs.append(dst)
    log.info("enhanced %d images into %s", len(outputs), dst_root)
    return outputs


def venation_cache_path(cache_root, relpath: str) -> Path:
    return (Path(cache_root) / relpath).with_suffix(".png")
