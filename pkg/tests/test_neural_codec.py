import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridsr import model_graph as mg
from hybridsr.datasets import synthetic_image, synthetic_samples
from hybridsr.dre_engine import apply_dre
from hybridsr.errors import DatasetError, ShapeError
from hybridsr.metrics import image_to_tensor
from hybridsr.neural_codec import (build_schedule, evaluate_dataset, tile_grid, upscale_image,
                                   upscale_tensor)
from hybridsr.quantization import QuantParams, QuantPlan, calibrate, make_plan


def plan_of(bits, dre):
    return QuantPlan([QuantParams(b, 1.0, 0, bool(d)) for b, d in zip(bits, dre)])


def pointwise_model():
    """1x1 conv into a pixel shuffle: every output depends on one input pixel."""
    w = np.array([1.0, 0.5, 0.25, 0.75]).reshape(4, 1, 1, 1)
    return mg.model_from_layers(
        [{"index": 0, "kind": "conv", "c_in": 1, "c_out": 4, "k": 1, "offset": 0},
         {"index": 1, "kind": "pixel_shuffle", "scale": 2}], np.r_[w.ravel(), np.zeros(4)], 2)


class TestSchedule:
    def test_documented_example(self):
        parts = build_schedule(plan_of([16, 16, 8, 8, 16], [0, 0, 0, 1, 0]))
        got = [(p.bits, int(p.dre), p.start, p.end) for p in parts]
        assert got == [(16, 0, 0, 1), (8, 0, 2, 2), (8, 1, 3, 3), (16, 0, 4, 4)]
        assert len(parts) - 1 == 3
        assert [p.unit for p in parts] == ["a16w8", "int8", "int8", "a16w8"]

    def test_uniform(self):
        assert len(build_schedule(plan_of([8] * 7, [0] * 7))) == 1

    def test_alternating(self):
        assert len(build_schedule(plan_of([8, 16] * 3, [0] * 6))) == 6

    @settings(max_examples=100, deadline=None)
    @given(layers=st.lists(st.tuples(st.sampled_from([8, 16, 32]), st.booleans()),
                           min_size=1, max_size=20))
    def test_maximal_runs_tile_the_plan(self, layers):
        bits, dre = zip(*layers)
        parts = build_schedule(plan_of(bits, dre))
        covered = [j for p in parts for j in range(p.start, p.end + 1)]
        assert covered == list(range(len(layers)))
        for p in parts:
            assert all((bits[j], dre[j]) == (p.bits, p.dre) for j in range(p.start, p.end + 1))
        for a, b in zip(parts, parts[1:]):
            assert (a.bits, a.dre) != (b.bits, b.dre)


class TestTiling:
    def test_grid(self):
        tiles = tile_grid(10, 7, 4)
        assert tiles[0] == (0, 4, 0, 4) and tiles[-1] == (8, 10, 4, 7)
        assert len(tiles) == 6

    def test_invalid(self):
        with pytest.raises(ValueError):
            tile_grid(4, 4, 0)
        with pytest.raises(ShapeError):
            tile_grid(0, 4, 2)

    def test_single_tile_equals_whole_forward(self, bicubic_setup, rng):
        model, _, stats = bicubic_setup
        plan = apply_dre(make_plan(model, stats, [8]), [0])
        x = rng.uniform(0, 1, (1, 1, 13, 9))
        out, run = upscale_tensor(model, plan, x, patch=13)
        np.testing.assert_array_equal(out, mg.forward(model, x, plan))
        assert run.tiles == 1

    def test_seams_confined_to_band(self, rng):
        model = mg.make_synthetic_model(depth=4, seed=2)
        radius = model.receptive_radius()
        s = model.upscale_factor
        x = rng.uniform(0, 1, (1, 1, 40, 40))
        whole = mg.forward(model, x)
        patch = 20
        tiled, _ = upscale_tensor(model, None, x, patch=patch)
        lr = np.arange(40)
        far = np.abs(lr - patch) > radius  # LR rows/cols away from the one internal seam
        far &= np.abs(lr + 0.5 - patch) >= radius + 0.5
        keep = np.repeat(far, s)
        np.testing.assert_array_equal(tiled[0, 0][np.ix_(keep, keep)],
                                      whole[0, 0][np.ix_(keep, keep)])
        assert not np.array_equal(tiled, whole)

    @pytest.mark.parametrize("patch", [1, 3, 5, 16])
    def test_pointwise_model_is_patch_independent(self, patch, rng):
        model = pointwise_model()
        x = rng.uniform(0, 1, (1, 1, 11, 16))
        stats = calibrate(model, [x], 1.0, 0)
        for plan in (None, make_plan(model, stats, [8])):
            out, _ = upscale_tensor(model, plan, x, patch=patch)
            np.testing.assert_array_equal(out, mg.forward(model, x, plan))

    def test_x4_shape(self):
        model = mg.make_analytic_model("bicubic", 4)
        img = synthetic_image(13, 10)
        stats = calibrate(model, [image_to_tensor(img)], 1.0, 0)
        for plan in (None, make_plan(model, stats, [8]), make_plan(model, stats, [16])):
            out, _ = upscale_image(model, plan, img, patch=6)
            assert (out.height, out.width) == (52, 40)

    def test_scan_counter(self, rng):
        model = mg.make_synthetic_model(depth=4, seed=1)
        x = rng.uniform(0, 1, (1, 1, 10, 7))
        stats = calibrate(model, [x], 1.0, 0)
        plan = apply_dre(make_plan(model, stats, [8, 16, 8, 16]), [0, 2])
        _, run = upscale_tensor(model, plan, x, patch=4)
        expected = 0
        for y0, y1, x0, x1 in tile_grid(10, 7, 4):
            shapes = model.input_shapes(y1 - y0, x1 - x0)
            for j in (0, 2):
                c, h, w = shapes[model.quantizable_layers[j]]
                expected += c * h * w
        assert run.scan_elements == expected
        assert run.dre_calls == {0: 6, 2: 6}
        assert run.clips[0] == run.clips[2] == 0
        assert (run.partitions, run.switches) == (4, 3)

    def test_threads_match_serial(self, rng):
        model = mg.make_synthetic_model(depth=4, seed=1)
        stats = calibrate(model, [rng.uniform(0, 1, (1, 1, 12, 12))], 1.0, 0)
        plan = make_plan(model, stats, [8, 16, 8, 8], dynamic=[True, False, False, True])
        x = rng.uniform(0, 1, (1, 1, 17, 23))
        a, ra = upscale_tensor(model, plan, x, patch=5, threads=1)
        b, rb = upscale_tensor(model, plan, x, patch=5, threads=4)
        np.testing.assert_array_equal(a, b)
        assert ra.to_dict() == rb.to_dict()

    def test_channel_mismatch(self, bicubic_x2, rng):
        img = synthetic_image(8, 8, channels=3)
        with pytest.raises(ShapeError):
            upscale_image(bicubic_x2, None, img)


class TestEvaluate:
    def test_passthrough_beats_all_eight(self, bicubic_setup):
        model, samples, stats = bicubic_setup
        a = evaluate_dataset(model, make_plan(model, stats, [32], weights=False), samples)
        b = evaluate_dataset(model, make_plan(model, stats, [8]), samples)
        assert a["mean_psnr"] >= b["mean_psnr"]
        assert b["bops"]["conv_reduction"] == 2.0
        assert b["run"]["switches"] == 0

    def test_mean_matches_entries(self, bicubic_setup):
        model, samples, stats = bicubic_setup
        rep = evaluate_dataset(model, make_plan(model, stats, [8]), samples, patch=7)
        psnrs = [e["psnr"] for e in rep["images"]]
        assert rep["mean_psnr"] == pytest.approx(sum(psnrs) / len(psnrs), abs=1e-12)
        assert rep["run"]["tiles"] == sum(e["run"]["tiles"] for e in rep["images"])

    def test_empty(self, bicubic_x2):
        with pytest.raises(DatasetError):
            evaluate_dataset(bicubic_x2, None, [])

    def test_rgb_samples(self):
        model = mg.make_analytic_model("bicubic", 2, channels=3)
        samples = synthetic_samples(2, 32, 2, channels=3, seed=1)
        rep = evaluate_dataset(model, None, samples)
        assert rep["images"][0]["psnr"] > 20
