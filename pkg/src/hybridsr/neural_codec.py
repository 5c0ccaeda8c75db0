"""Runtime side: partition dispatch, patch-wise upscaling and dataset evaluation.

The dispatcher groups consecutive quantizable layers sharing
(wordlength, DRE flag) into partitions; every boundary between partitions
is one unit switch. The dual-unit NPU is modelled only by labelling each
partition with the unit its wordlength maps to; no timing is simulated.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cost_model import get_bops
from .errors import DatasetError, ShapeError
from .metrics import ImageBuf, image_to_tensor, psnr, ssim, tensor_to_image
from .model_graph import forward, prepare_weights
from .quantization import QuantCounters

DEFAULT_PATCH = 96
REPORT_FORMAT = "hybridsr-eval"
REPORT_VERSION = 1
UNITS = {8: "int8", 16: "a16w8", 32: "fp32"}


@dataclass(frozen=True)
class Partition:
    start: int
    end: int
    bits: int
    dre: bool

    @property
    def unit(self):
        return UNITS.get(self.bits, f"w{self.bits}")

    def __len__(self):
        return self.end - self.start + 1

    def to_dict(self):
        return {"start": self.start, "end": self.end, "bits": self.bits, "dre": self.dre,
                "unit": self.unit}


def build_schedule(plan):
    """Maximal runs of equal (wordlength, DRE) over the plan's layers."""
    parts = []
    for j, p in enumerate(plan.activations):
        key = (p.bits, bool(p.dynamic))
        if parts and (parts[-1].bits, parts[-1].dre) == key:
            parts[-1] = Partition(parts[-1].start, j, *key)
        else:
            parts.append(Partition(j, j, *key))
    return parts


@dataclass
class RunStats:
    partitions: int = 0
    switches: int = 0
    tiles: int = 0
    dre_calls: dict = field(default_factory=dict)
    scan_elements: int = 0
    clips: dict = field(default_factory=dict)

    @property
    def total_clips(self):
        return sum(self.clips.values())

    def absorb(self, counters):
        for k, v in counters.dre_calls.items():
            self.dre_calls[k] = self.dre_calls.get(k, 0) + v
        for k, v in counters.clips.items():
            self.clips[k] = self.clips.get(k, 0) + v
        self.scan_elements += counters.scan_elements

    def merge(self, other):
        self.tiles += other.tiles
        for k, v in other.dre_calls.items():
            self.dre_calls[k] = self.dre_calls.get(k, 0) + v
        for k, v in other.clips.items():
            self.clips[k] = self.clips.get(k, 0) + v
        self.scan_elements += other.scan_elements
        return self

    def to_dict(self):
        return {
            "partitions": self.partitions,
            "switches": self.switches,
            "tiles": self.tiles,
            "dre_calls": {str(k): v for k, v in sorted(self.dre_calls.items())},
            "scan_elements": self.scan_elements,
            "clips": {str(k): v for k, v in sorted(self.clips.items())},
            "total_clips": self.total_clips,
        }


def _schedule_stats(plan):
    stats = RunStats()
    if plan is not None:
        parts = build_schedule(plan)
        stats.partitions = len(parts)
        stats.switches = max(len(parts) - 1, 0)
    return stats


def tile_grid(height, width, patch):
    """(y0, y1, x0, x1) LR tiles, row-major; edge tiles may be smaller."""
    if patch < 1:
        raise ValueError("patch size must be >= 1")
    if height < 1 or width < 1:
        raise ShapeError("image must be at least 1x1", dims=(height, width))
    return [(y, min(y + patch, height), x, min(x + patch, width))
            for y in range(0, height, patch) for x in range(0, width, patch)]


def upscale_tensor(model, plan, x, patch=DEFAULT_PATCH, threads=1, weights=None):
    """Tile ``x`` (1, c, h, w), run each tile, stitch at upscaled positions."""
    _, c, h, w = x.shape
    s = model.upscale_factor
    tiles = tile_grid(h, w, patch)
    if weights is None:
        weights = prepare_weights(model, plan)

    def run(tile):
        y0, y1, x0, x1 = tile
        counters = QuantCounters()
        out = forward(model, x[:, :, y0:y1, x0:x1], plan=plan, counters=counters,
                      weights=weights)
        return out, counters

    if threads > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, tiles))
    else:
        results = [run(t) for t in tiles]
    out = np.zeros((1, c, h * s, w * s))
    stats = _schedule_stats(plan)
    stats.tiles = len(tiles)
    for (y0, y1, x0, x1), (res, counters) in zip(tiles, results):
        out[:, :, y0 * s:y1 * s, x0 * s:x1 * s] = res
        stats.absorb(counters)
    return out, stats


def upscale_image(model, plan, image, patch=DEFAULT_PATCH, threads=1):
    """Upscale an 8-bit image patch by patch; returns (ImageBuf, RunStats)."""
    if image.channels != model.in_channels:
        raise ShapeError(f"image has {image.channels} channels, model expects "
                         f"{model.in_channels}")
    out, stats = upscale_tensor(model, plan, image_to_tensor(image), patch, threads)
    return tensor_to_image(out), stats


def evaluate_dataset(model, plan, samples, convention="y_channel", shave=None,
                     patch=DEFAULT_PATCH, threads=1):
    """Per-image and mean PSNR/SSIM, BOPs and run statistics as a report dict."""
    samples = list(samples)
    if not samples:
        raise DatasetError("dataset is empty")
    shave = model.upscale_factor if shave is None else shave
    weights = prepare_weights(model, plan)
    entries = []
    total = _schedule_stats(plan)
    for smp in samples:
        x = image_to_tensor(smp.lr)
        out, stats = upscale_tensor(model, plan, x, patch, threads, weights)
        sr = tensor_to_image(out)
        if sr.pixels.shape != smp.hr.pixels.shape:
            raise DatasetError(f"{smp.name}: output {sr.pixels.shape} vs HR {smp.hr.pixels.shape}")
        p = float(psnr(sr, smp.hr, convention, shave))
        entries.append({"name": smp.name, "psnr": p if math.isfinite(p) else "inf",
                        "ssim": float(ssim(sr, smp.hr, convention, shave)),
                        "run": stats.to_dict()})
        total.merge(stats)
    bits = plan.bits if plan is not None else [32] * len(model.quantizable_layers)
    first = samples[0].lr
    cost = get_bops(model, bits, (first.height, first.width))
    psnrs = [e["psnr"] for e in entries]
    mean_psnr = "inf" if "inf" in psnrs else sum(psnrs) / len(psnrs)
    return {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "conventions": {"metric": convention, "shave": shave, "patch": patch},
        "images": entries,
        "mean_psnr": mean_psnr,
        "mean_ssim": sum(e["ssim"] for e in entries) / len(entries),
        "bops": cost.to_dict(),
        "schedule": [p.to_dict() for p in build_schedule(plan)] if plan is not None else [],
        "run": total.to_dict(),
    }
