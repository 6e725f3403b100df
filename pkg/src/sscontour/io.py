"""Image files and the on-disk corpus layout.

A corpus directory holds ``images/<name>.png`` and, for annotated images,
``groundTruth/<name>/<annotator>.png`` binary boundary masks.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

DATA_ENV = "SSCONTOUR_DATA"


def resolve_data_path(path) -> Path:
    """Relative paths are taken against ``$SSCONTOUR_DATA`` when it is set."""
    p = Path(path)
    root = os.environ.get(DATA_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_rgb(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def write_soft_map(path, values: np.ndarray) -> None:
    """16-bit grayscale PNG with value round(p * 65535)."""
    q = np.round(np.clip(values, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path)


def read_soft_map(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64) / 65535.0


@dataclass
class CorpusImage:
    name: str
    image_path: Path
    truth_paths: list[Path] = field(default_factory=list)

    def image(self) -> np.ndarray:
        return read_rgb(self.image_path)

    def truth(self) -> list[np.ndarray]:
        """Per-annotator boundary masks (may be empty)."""
        return [read_mask(p) for p in self.truth_paths]


def load_corpus(root) -> list[CorpusImage]:
    """List a corpus directory in name order."""
    root = resolve_data_path(root)
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise FileNotFoundError(f"{img_dir} does not exist")
    items = []
    for path in sorted(img_dir.glob("*.png")):
        gt_dir = root / "groundTruth" / path.stem
        truths = sorted(gt_dir.glob("*.png")) if gt_dir.is_dir() else []
        items.append(CorpusImage(path.stem, path, truths))
    if not items:
        raise FileNotFoundError(f"no images under {img_dir}")
    return items


def union_mask(masks, shape=None) -> np.ndarray:
    """Pixel is contour if any annotator marks it."""
    masks = list(masks)
    if not masks:
        if shape is None:
            raise ValueError("no masks and no shape given")
        return np.zeros(shape, dtype=bool)
    out = np.zeros(masks[0].shape, dtype=bool)
    for m in masks:
        if m.shape != out.shape:
            raise ValueError("annotator masks differ in shape")
        out |= m.astype(bool)
    return out
