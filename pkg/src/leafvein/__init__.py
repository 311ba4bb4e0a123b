"""Plant species identification from leaf images with transfer-learned CNNs."""

__version__ = "0.1.0"
