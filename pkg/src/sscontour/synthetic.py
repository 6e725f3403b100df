"""Synthetic images of overlapping shapes with exact boundary ground truth.

Each image is a stack of random polygons and ellipses painted over a
background.  Regions carry a flat colour plus a low-contrast stripe texture
and pixel noise, so that not every intensity edge is a boundary.  The
ground truth marks a pixel when its region differs from the pixel to the
right or below, which is exactly where the painted colours change.

Run ``python -m sscontour.synthetic OUT --train 43 --test 17`` to write a
corpus with ``train/`` and ``test/`` subdirectories.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
from skimage.draw import ellipse, polygon

from .io import write_mask, write_rgb


def region_boundaries(regions: np.ndarray) -> np.ndarray:
    """True where the region id changes towards the right or lower neighbour."""
    b = np.zeros(regions.shape, dtype=bool)
    b[:, :-1] |= regions[:, :-1] != regions[:, 1:]
    b[:-1, :] |= regions[:-1, :] != regions[1:, :]
    return b


def _random_polygon(rng, h, w):
    n = int(rng.integers(3, 8))
    cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
    radius = rng.uniform(0.15, 0.35) * min(h, w)
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    rad = radius * rng.uniform(0.6, 1.0, n)
    return polygon(cy + rad * np.sin(ang), cx + rad * np.cos(ang), shape=(h, w))


def _random_ellipse(rng, h, w):
    cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
    ry, rx = rng.uniform(0.1, 0.3, 2) * min(h, w)
    return ellipse(cy, cx, ry, rx, shape=(h, w), rotation=rng.uniform(0, np.pi))


def _stripes(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(4.0, 10.0)
    phase = rng.uniform(0, 2 * np.pi)
    return np.sin(2 * np.pi * (yy * np.sin(theta) + xx * np.cos(theta)) / period + phase)


def generate_image(rng: np.random.Generator, shape=(96, 96), n_shapes=(2, 5),
                   texture: float = 20.0, noise: float = 6.0):
    """Return ``(image uint8 (H, W, 3), boundary mask (H, W))``."""
    h, w = shape
    regions = np.zeros((h, w), dtype=np.int32)
    k = int(rng.integers(n_shapes[0], n_shapes[1] + 1))
    for i in range(1, k + 1):
        rr, cc = _random_polygon(rng, h, w) if rng.random() < 0.5 else _random_ellipse(rng, h, w)
        regions[rr, cc] = i
    colors = rng.uniform(30, 225, size=(k + 1, 3))
    image = colors[regions]
    for i in range(k + 1):
        amp = texture * rng.uniform(0.0, 1.0)
        image[regions == i] += amp * _stripes(rng, h, w)[regions == i, None]
    image += rng.normal(0.0, noise, size=image.shape)
    return np.clip(np.round(image), 0, 255).astype(np.uint8), region_boundaries(regions)


def write_corpus(root, n_images: int, shape=(96, 96), seed: int = 0, labeled=True) -> list[str]:
    """Write ``images/`` and (when ``labeled``) ``groundTruth/<name>/0.png``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = []
    for i in range(n_images):
        image, truth = generate_image(rng, shape)
        name = f"syn_{i:04d}"
        write_rgb(root / "images" / f"{name}.png", image)
        if labeled:
            gt_dir = root / "groundTruth" / name
            gt_dir.mkdir(parents=True, exist_ok=True)
            write_mask(gt_dir / "0.png", truth)
        names.append(name)
    return names


def write_split_corpus(root, n_train: int, n_test: int, shape=(96, 96), seed: int = 0) -> None:
    """A ``train/`` and a ``test/`` corpus drawn from independent streams."""
    root = Path(root)
    write_corpus(root / "train", n_train, shape, seed)
    write_corpus(root / "test", n_test, shape, seed + 1_000_003)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m sscontour.synthetic", description=__doc__.splitlines()[0])
    ap.add_argument("out", help="output directory")
    ap.add_argument("--train", type=int, default=43)
    ap.add_argument("--test", type=int, default=17)
    ap.add_argument("--size", type=int, nargs=2, default=(96, 96), metavar=("H", "W"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    write_split_corpus(args.out, args.train, args.test, tuple(args.size), args.seed)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
