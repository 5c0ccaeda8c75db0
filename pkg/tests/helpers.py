"""Shared builders and oracles for the test suite."""

import json

import numpy as np

from hybridsr import model_graph as mg
from hybridsr.cli import TIMESTAMP_KEY, main
from hybridsr.datasets import synthetic_samples
from hybridsr.metrics import image_to_tensor
from hybridsr.quantization import calibrate
from hybridsr.tensor_core import conv2d, pixel_shuffle_naive
from hybridsr.wl_optimizer import QualityHarness


def synthetic_setup(depth, seed, images=4, size=24, scale=2):
    model = mg.make_synthetic_model(depth=depth, seed=seed, scale=scale)
    samples = synthetic_samples(images, size, scale, seed=seed)
    stats = calibrate(model, [image_to_tensor(s.lr) for s in samples], 1.0, 0)
    return model, samples, stats


def harness_for(model, samples, stats, epsilon=0.1, **kw):
    return QualityHarness(model, samples, stats, epsilon=epsilon, **kw)


def synthetic_harness(depth, seed, epsilon=0.1, **kw):
    return harness_for(*synthetic_setup(depth, seed, **kw), epsilon=epsilon)


def greedy_replay(table, order, n, epsilon):
    """Single-pass greedy over a precomputed {bits: drop} lookup."""
    bits = (16,) * n
    if table[bits] > epsilon:
        return list(bits), False
    for j in order:
        trial = bits[:j] + (8,) + bits[j + 1:]
        if table[trial] <= epsilon:
            bits = trial
    return list(bits), True


def rnd(v):
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def oracle_quant(x, bits, lo, hi):
    s = (2 ** bits - 1) / (hi - lo)
    z = rnd(s * lo)
    return (np.clip(rnd(x * s - z), 0, 2 ** bits - 1) + z) / s


def oracle_psnr(out, hr, shave):
    sr = rnd(np.clip(out[0, 0], 0, 1) * 255)
    ref = hr.pixels[:, :, 0].astype(float)
    d = (sr - ref)[shave:-shave, shave:-shave]
    return 10 * np.log10(255.0 ** 2 / np.mean(d * d))


def wide_range_drop_oracle(model, samples, stats, low_layer):
    """Per-layer drop of the conv-only wide-range fixture, written out directly."""
    quant = model.quantizable_layers

    def run(bits):
        total = 0.0
        for smp in samples:
            cur = image_to_tensor(smp.lr)
            for layer in model.layers:
                if layer.kind == "pixel_shuffle":
                    cur = pixel_shuffle_naive(cur, layer.scale)
                    continue
                w, b = model.conv_weights(layer.index)
                if layer.index in quant:
                    j = quant.index(layer.index)
                    r = stats.ranges[j]
                    cur = oracle_quant(cur, bits[j], r.x_min, r.x_max)
                    w = oracle_quant(w, 8, w.min(), w.max()) if w.max() > w.min() else w
                cur = conv2d(cur, w, b, layer.stride, layer.padding)
            total += min(oracle_psnr(cur, smp.hr, model.upscale_factor), 100.0)
        return total / len(samples)

    base = run([16] * len(quant))
    bits = [16] * len(quant)
    bits[low_layer] = 8
    return max(0.0, base - run(bits))


def run(*argv):
    return main([str(a) for a in argv])


def strip_time(path):
    doc = json.loads(path.read_text())
    doc.pop(TIMESTAMP_KEY, None)
    return json.dumps(doc, sort_keys=True)


def pipeline(root, kind="bicubic", epsilon="0.1", k="0.5"):
    """Offline flow plus runtime evaluation; returns the artifact paths."""
    root.mkdir(parents=True, exist_ok=True)
    m, data = root / "model", root / "data"
    extra = ["--depth", 4, "--seed", 3] if kind == "synthetic" else []
    assert run("gen-model", "--kind", kind, "--scale", 2, "--out", m, *extra) == 0
    assert run("gen-images", "--out", data, "--count", 6, "--size", 32, "--seed", 2) == 0
    assert run("calibrate", "--model", m, "--data", data, "--fraction", 0.5, "--seed", 4,
               "--out", root / "stats.json") == 0
    common = ["--model", m, "--stats", root / "stats.json", "--data", data]
    assert run("optimize", *common, "--epsilon", epsilon, "--out", root / "plan.json",
               "--log-out", root / "search.json") == 0
    assert run("lra", *common, "--out", root / "lra.json") == 0
    assert run("select-dre", "--lra", root / "lra.json", "--plan", root / "plan.json",
               "--k", k, "--out", root / "plan_dre.json") == 0
    assert run("bops", "--model", m, "--plan", root / "plan_dre.json", "--input-size", "16x16",
               "--out", root / "bops.json") == 0
    assert run("upscale", "--model", m, "--plan", root / "plan_dre.json",
               "--input", data / "HR" / "img000.png", "--output", root / "up.png",
               "--patch", 12, "--stats-out", root / "run.json") == 0
    assert run("eval", "--model", m, "--plan", root / "plan_dre.json", "--data", data,
               "--patch", 12, "--out", root / "report.json") == 0
    return {n: root / f"{n}.json"
            for n in ("stats", "plan", "search", "lra", "plan_dre", "bops", "run", "report")}
