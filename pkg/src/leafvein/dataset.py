"""Class-per-directory image corpus: scanning, stratified splitting, decoding."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".tif", ".tiff", ".png", ".jpg", ".jpeg")
MANIFEST_VERSION = 1
TRAIN, TEST = "train", "test"


@dataclass(frozen=True)
class Record:
    path: str  # relative to the dataset root, POSIX separators
    class_index: int
    split: Optional[str] = None


@dataclass
class DatasetManifest:
    class_names: list[str]
    records: list[Record]
    seed: Optional[int] = None
    test_fraction: Optional[float] = None
    root: Optional[Path] = None
    warnings: list[str] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self, split: Optional[str] = None) -> list[int]:
        counts = [0] * self.num_classes
        for r in self.records:
            if split is None or r.split == split:
                counts[r.class_index] += 1
        return counts

    def split_records(self, split: str) -> list[Record]:
        return [r for r in self.records if r.split == split]

    def index_of(self, name: str) -> int:
        return self.class_names.index(name)

    def name_of(self, index: int) -> str:
        return self.class_names[index]

    def abspath(self, record: Record) -> Path:
        if self.root is None:
            raise ConfigError("manifest has no dataset root attached")
        return self.root / record.path

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "seed": self.seed,
            "test_fraction": self.test_fraction,
            "class_names": list(self.class_names),
            "records": [
                {"path": r.path, "class_index": r.class_index, "split": r.split}
                for r in self.records
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path, root=None) -> "DatasetManifest":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if data.get("version") != MANIFEST_VERSION:
            raise ConfigError(f"unsupported manifest version {data.get('version')!r} in {path}")
        records = [Record(r["path"], int(r["class_index"]), r.get("split")) for r in data["records"]]
        return cls(
            class_names=list(data["class_names"]),
            records=records,
            seed=data.get("seed"),
            test_fraction=data.get("test_fraction"),
            root=Path(root) if root is not None else None,
        )


def _is_decodable(path: Path) -> bool:
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # broken EXIF and friends; the load itself decides
            with Image.open(path) as im:
                im.load()
        return True
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError):
        return False


def scan_dataset(root) -> DatasetManifest:
    """Build an unsplit manifest from ``<root>/<species>/<image>``.

    Class indices follow the lexicographic order of the species directory
    names. Files that cannot be decoded are skipped and listed in
    ``manifest.warnings``.
    """
    if root is None:
        raise ConfigError("dataset root is not set")
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset root does not exist: {root}")

    class_dirs = sorted((d for d in root.iterdir() if d.is_dir()), key=lambda d: d.name)
    if len(class_dirs) < 2:
        raise ConfigError(f"need at least 2 class directories under {root}, found {len(class_dirs)}")

    records: list[Record] = []
    warnings: list[str] = []
    for index, class_dir in enumerate(class_dirs):
        files = sorted(
            (p for p in class_dir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS),
            key=lambda p: p.name,
        )
        kept = 0
        for p in files:
            if not _is_decodable(p):
                msg = f"skipping undecodable image: {p}"
                log.warning(msg)
                warnings.append(msg)
                continue
            records.append(Record(p.relative_to(root).as_posix(), index))
            kept += 1
        if kept == 0:
            raise ConfigError(f"class directory holds no decodable images: {class_dir}")
        log.info("class %d %-24s %d images", index, class_dir.name, kept)

    return DatasetManifest(
        class_names=[d.name for d in class_dirs],
        records=records,
        root=root,
        warnings=warnings,
    )


def split_count(total: int, test_fraction: float) -> int:
    """Per-class test count, rounding half up."""
    return int(math.floor(test_fraction * total + 0.5))


def stratified_split(manifest: DatasetManifest, test_fraction: float = 0.2, seed: int = 42) -> DatasetManifest:
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    if any(r.split is not None for r in manifest.records):
        raise ConfigError("manifest already carries a train/test assignment")

    rng = np.random.default_rng(seed)
    by_class: dict[int, list[Record]] = {k: [] for k in range(manifest.num_classes)}
    for r in sorted(manifest.records, key=lambda r: (r.class_index, r.path)):
        by_class[r.class_index].append(r)

    assigned: dict[str, str] = {}
    for k, members in by_class.items():
        n = len(members)
        n_test = split_count(n, test_fraction)
        if n_test < 1 or n - n_test < 1:
            raise DataError(
                f"class {manifest.class_names[k]!r} has {n} images; cannot give both splits "
                f"at least one image with test_fraction={test_fraction}"
            )
        order = rng.permutation(n)
        for pos, i in enumerate(order):
            assigned[members[i].path] = TEST if pos < n_test else TRAIN

    records = [replace(r, split=assigned[r.path]) for r in manifest.records]
    return replace(manifest, records=records, seed=seed, test_fraction=test_fraction)


def load_image(path, target_size: Sequence[int] = (224, 224)) -> np.ndarray:
    """Decode ``path`` into an ``H x W x 3`` uint8 array, bilinearly resized.

    Single-channel sources are replicated across the three channels.
    """
    h, w = target_size
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("RGB", "L"):
                pass
            elif im.mode in ("RGBA", "LA", "P", "CMYK", "YCbCr", "PA"):
                im = im.convert("RGB")
            else:
                # 16-bit / float grayscale
                arr = np.asarray(im, dtype=np.float64)
                hi = arr.max() if arr.size else 0.0
                arr = arr * (255.0 / hi) if hi > 255 else arr
                im = Image.fromarray(np.clip(np.rint(arr), 0, 255).astype(np.uint8), "L")
            if im.size != (w, h):
                im = im.resize((w, h), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return np.ascontiguousarray(arr)


def one_hot(index: int, num_classes: int) -> np.ndarray:
    if not 0 <= index < num_classes:
        raise ValueError(f"class index {index} out of range for {num_classes} classes")
    v = np.zeros(num_classes, dtype=np.float32)
    v[index] = 1.0
    return v
