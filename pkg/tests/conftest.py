from pathlib import Path

import numpy as np
import pytest
from PIL import Image, ImageDraw

DATA = Path(__file__).parent / "data"


def draw_leaf(seed: int, species: int = 0, size=(160, 128)) -> Image.Image:
    """A leaf-like blade with a midrib and secondary veins on white."""
    rng = np.random.default_rng(seed)
    w, h = size
    im = Image.new("RGB", size, "white")
    d = ImageDraw.Draw(im)
    green = (50 + 40 * (species % 3), 120 + 25 * (species % 4), 40)
    d.ellipse([w * 0.1, h * 0.15, w * 0.9, h * 0.85], fill=green)
    cy = h // 2
    d.line([w * 0.1, cy, w * 0.9, cy], fill=(25, 70, 20), width=2)
    n_veins = 3 + species
    for i in range(n_veins):
        x0 = w * (0.2 + 0.6 * i / max(n_veins - 1, 1))
        dy = h * (0.25 + 0.1 * rng.random())
        d.line([x0, cy, x0 + w * 0.08, cy - dy], fill=(30, 80, 25), width=1)
        d.line([x0, cy, x0 + w * 0.08, cy + dy], fill=(30, 80, 25), width=1)
    return im


def make_corpus(root: Path, n_classes=2, per_class=8, size=(160, 128), ext=".tif", names=None) -> Path:
    names = names or [f"species_{k:02d}" for k in range(n_classes)]
    for k, name in enumerate(names):
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            draw_leaf(1000 * k + i, k, size).save(d / f"leaf_{i:03d}{ext}")
    return root


@pytest.fixture
def corpus(tmp_path):
    return make_corpus(tmp_path / "leaves", n_classes=2, per_class=8)


@pytest.fixture
def reference_leaf():
    return np.asarray(Image.open(DATA / "reference_leaf.png").convert("RGB"))


_acceptance = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        _acceptance.append(report)
    elif report.when == "setup" and report.skipped and "test_acceptance.py" in report.nodeid:
        _acceptance.append(report)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for rep in _acceptance:
        verdict = {"passed": "PASS", "failed": "FAIL", "skipped": "NOT RUN"}[rep.outcome]
        name = rep.nodeid.split("::")[-1]
        line = f"{verdict:8s} {name}"
        if rep.skipped and isinstance(rep.longrepr, tuple):
            line += f"  ({rep.longrepr[2]})"
        terminalreporter.write_line(line)
