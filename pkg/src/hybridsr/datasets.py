"""Evaluation data: (LR, HR) pairs, dataset directories and synthetic images.

A dataset directory holds ``HR/`` and optionally ``LR/`` with matching
basenames. Without ``LR/`` the low-resolution inputs are produced by the
``bicubic`` degradation: HR is cropped to a multiple of the scale, then
downscaled with Pillow's antialiased bicubic filter.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError
from .metrics import ImageBuf, load_image, save_image

IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".pnm")
DEGRADATIONS = ("bicubic",)


@dataclass(frozen=True)
class Sample:
    name: str
    lr: ImageBuf
    hr: ImageBuf


def mod_crop(img, scale):
    h = img.height - img.height % scale
    w = img.width - img.width % scale
    return ImageBuf(img.pixels[:h, :w])


def degrade(hr, scale, method="bicubic"):
    if method not in DEGRADATIONS:
        raise DatasetError(f"unknown degradation {method!r}")
    hr = mod_crop(hr, scale)
    px = hr.pixels
    im = Image.fromarray(px[:, :, 0] if hr.channels == 1 else px)
    small = im.resize((hr.width // scale, hr.height // scale), Image.Resampling.BICUBIC)
    return ImageBuf(np.asarray(small, dtype=np.uint8).copy())


def make_pair(name, hr, scale, method="bicubic"):
    hr = mod_crop(hr, scale)
    return Sample(name, degrade(hr, scale, method), hr)


def _images_in(folder):
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(root, scale, degradation="bicubic"):
    """Load (LR, HR) samples sorted by name."""
    root = Path(root)
    hr_dir = root / "HR"
    if not hr_dir.is_dir():
        raise DatasetError(f"{root}: missing HR/ directory")
    hr_files = _images_in(hr_dir)
    if not hr_files:
        raise DatasetError(f"{hr_dir}: no images")
    lr_dir = root / "LR"
    samples = []
    if lr_dir.is_dir():
        lr_files = {p.stem: p for p in _images_in(lr_dir)}
        for hp in hr_files:
            lp = lr_files.get(hp.stem)
            if lp is None:
                raise DatasetError(f"{hp}: no matching LR image in {lr_dir}")
            lr = load_image(lp)
            hr = mod_crop(load_image(hp), scale)
            if (hr.height, hr.width) != (lr.height * scale, lr.width * scale):
                raise DatasetError(f"{hp}: HR size {hr.height}x{hr.width} is not x{scale} "
                                   f"of LR {lr.height}x{lr.width}")
            samples.append(Sample(hp.stem, lr, hr))
        extra = set(lr_files) - {p.stem for p in hr_files}
        if extra:
            raise DatasetError(f"{lr_dir}: LR images without HR pair: {sorted(extra)}")
    else:
        if degradation is None:
            raise DatasetError(f"{root}: no LR/ directory and no degradation requested")
        for hp in hr_files:
            samples.append(make_pair(hp.stem, load_image(hp), scale, degradation))
    return samples


def synthetic_image(height, width, channels=1, seed=0, value_range=(0.0, 1.0)):
    """Seeded natural-looking test image: smooth texture, blobs and hard edges."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    planes = []
    base = np.zeros((height, width))
    for _ in range(6):
        fy, fx = rng.uniform(0.01, 0.12, 2)
        phase = rng.uniform(0, 2 * np.pi)
        base += rng.uniform(0.2, 1.0) * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    for _ in range(4):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        r = rng.uniform(0.08, 0.3) * min(height, width)
        base += rng.uniform(-1.5, 1.5) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    for _ in range(3):
        y0, x0 = rng.integers(0, height), rng.integers(0, width)
        hh, ww = rng.integers(height // 8 + 1, height // 2 + 2), rng.integers(width // 8 + 1,
                                                                             width // 2 + 2)
        base[y0:y0 + hh, x0:x0 + ww] += rng.uniform(-1.2, 1.2)
    base += 0.05 * rng.standard_normal((height, width))
    for c in range(channels):
        plane = base + (0.3 * rng.standard_normal() if c else 0.0) * np.cos(
            2 * np.pi * rng.uniform(0.01, 0.05) * (yy + xx))
        planes.append(plane)
    img = np.stack(planes, axis=-1)
    img = (img - img.min()) / (img.max() - img.min())
    lo, hi = value_range
    img = lo + (hi - lo) * img
    return ImageBuf(np.floor(img * 255.0 + 0.5).astype(np.uint8))


def synthetic_samples(count, size, scale, channels=1, seed=0, value_range=(0.0, 1.0)):
    """``count`` synthetic (LR, HR) pairs with HR of ``size`` x ``size``."""
    return [make_pair(f"img{i:03d}", synthetic_image(size, size, channels, seed * 1000 + i,
                                                     value_range), scale)
            for i in range(count)]


def write_dataset(root, samples, with_lr=False, suffix=".png"):
    root = Path(root)
    (root / "HR").mkdir(parents=True, exist_ok=True)
    if with_lr:
        (root / "LR").mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_image(s.hr, root / "HR" / f"{s.name}{suffix}")
        if with_lr:
            save_image(s.lr, root / "LR" / f"{s.name}{suffix}")
    return root
