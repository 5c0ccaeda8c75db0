"""Command-line front end for the offline flow and runtime evaluation.

Every subcommand writes its machine output to files; stdout carries a
short human summary and failures print one JSON line on stderr. Exit
codes: 0 success, 2 usage, 3 input/format error, 4 infeasible search.
"""

import argparse
import datetime as _dt
import hashlib
import json
import math
import sys
from pathlib import Path

from . import __version__
from .cost_model import get_bops
from .datasets import load_dataset, synthetic_image, write_dataset, make_pair
from .dre_engine import LraReport, apply_dre, lra, select_dre_layers
from .errors import DatasetError, HybridSRError
from .metrics import CONVENTIONS, image_to_tensor, load_image, save_image
from .model_graph import (load_model, make_analytic_model, make_synthetic_model,
                          make_wide_range_model, save_model)
from .neural_codec import DEFAULT_PATCH, build_schedule, evaluate_dataset, upscale_image
from .quantization import CalibrationStats, QuantPlan, calibrate
from .wl_optimizer import (DEFAULT_EPSILON, OPTIMIZERS, QualityHarness, SearchBudget,
                           quantsr_wlopt, run_optimizer)

EXIT_OK = 0
EXIT_IO = 3
EXIT_INFEASIBLE = 4
TIMESTAMP_KEY = "generated_at"


class Infeasible(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def file_hash(path):
    path = Path(path)
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for p in files:
        h.update(str(p.relative_to(path) if path.is_dir() else p.name).encode())
        h.update(_content_bytes(p))
    return h.hexdigest()


def _content_bytes(path):
    """File bytes, with the timestamp dropped from our own JSON documents."""
    data = path.read_bytes()
    if path.suffix != ".json":
        return data
    try:
        doc = json.loads(data)
    except ValueError:
        return data
    if isinstance(doc, dict) and TIMESTAMP_KEY in doc:
        doc.pop(TIMESTAMP_KEY)
        return json.dumps(doc, sort_keys=True).encode()
    return data


def provenance(args, inputs, **extra):
    doc = {"tool": "hybridsr", "version": __version__,
           "inputs": {k: file_hash(v) for k, v in sorted(inputs.items()) if v is not None}}
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    doc.update(extra)
    return doc


def _json_safe(obj):
    """Non-finite floats become the strings "inf", "-inf" and "nan"."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def write_json(path, doc):
    """Write ``doc`` with a timestamp kept outside every other field."""
    out = _json_safe(dict(doc))
    out[TIMESTAMP_KEY] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(out, indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DatasetError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: malformed JSON ({exc})") from None


def parse_wordlengths(text):
    try:
        ws = sorted({int(v) for v in text.split(",") if v.strip()})
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad wordlength list {text!r}") from None
    if not ws or any(w not in (8, 16, 32) for w in ws):
        raise argparse.ArgumentTypeError("wordlengths must be drawn from 8, 16, 32")
    return ws


def parse_epsilon(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError("epsilon must be >= 0")
    return v


def parse_k(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError("K must lie in [0, 1]")
    return v


def parse_hw(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _samples(args, model):
    return load_dataset(args.data, model.upscale_factor, args.degrade)


def _calibration_samples(args, model, stats):
    samples = {s.name: s for s in _samples(args, model)}
    missing = [n for n in stats.selected if n not in samples]
    if missing:
        raise DatasetError(f"{args.data}: calibration images not found: {missing}")
    return [samples[n] for n in stats.selected]


def _load_plan(path):
    return QuantPlan.from_dict(read_json(path)) if path else None


def _load_stats(path):
    return CalibrationStats.from_dict(read_json(path))


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_model(args):
    if args.kind in ("bicubic", "bilinear"):
        model = make_analytic_model(args.kind, args.scale, args.image_channels)
    elif args.kind == "synthetic":
        model = make_synthetic_model(args.depth, args.channels, args.scale, args.seed,
                                     args.image_channels)
    else:
        model = make_wide_range_model(args.scale)
    save_model(model, args.out)
    print(f"{model.name}: {len(model.layers)} layers, "
          f"{len(model.quantizable_layers)} quantizable -> {args.out}")


def cmd_gen_images(args):
    samples = [make_pair(f"img{i:03d}",
                         synthetic_image(args.size, args.size, args.channels,
                                         args.seed * 1000 + i, (args.low, args.high)),
                         args.scale)
               for i in range(args.count)]
    write_dataset(args.out, samples, with_lr=args.with_lr)
    print(f"{len(samples)} images -> {args.out}")


def cmd_calibrate(args):
    model = load_model(args.model)
    samples = _samples(args, model)
    stats = calibrate(model, [image_to_tensor(s.lr) for s in samples], args.fraction,
                      args.seed, names=[s.name for s in samples])
    doc = stats.to_dict()
    doc["provenance"] = provenance(args, {"model": args.model, "data": args.data})
    write_json(args.out, doc)
    print(f"calibrated {len(model.quantizable_layers)} layers on "
          f"{len(stats.selected)}/{len(samples)} images -> {args.out}")


def _harness(args, model, stats):
    samples = _calibration_samples(args, model, stats)
    return QualityHarness(model, samples, stats, args.epsilon, args.convention,
                          args.shave, args.threads)


def cmd_optimize(args):
    model = load_model(args.model)
    stats = _load_stats(args.stats)
    h = _harness(args, model, stats)
    if args.optimizer == "wlopt":
        result = quantsr_wlopt(h, args.wordlengths)
    else:
        budget = args.budget or h.n_layers + 1
        result = run_optimizer(args.optimizer, h, args.wordlengths, budget, args.seed)
    plan = h.plan(result.bits)
    plan.provenance = provenance(
        args, {"model": args.model, "stats": args.stats},
        optimizer=args.optimizer, calibration_hash=stats.content_hash,
        reference=result.reference, wordlengths=list(args.wordlengths),
        result={k: v for k, v in result.to_dict().items() if k != "log"})
    write_json(args.out, plan.to_dict())
    if args.log_out:
        write_json(args.log_out, result.to_dict())
    print(f"{args.optimizer}: bits={result.bits} drop={result.drop:.4f} dB "
          f"feasible={result.feasible} evals={result.evaluations} "
          f"conv reduction={result.conv_reduction:.3f}x -> {args.out}")
    if not result.feasible:
        raise Infeasible(f"no plan meets epsilon={args.epsilon} "
                         f"(best drop {result.drop:.4f} dB)")


def cmd_lra(args):
    model = load_model(args.model)
    stats = _load_stats(args.stats)
    h = _harness(args, model, stats)
    report = lra(h)
    doc = report.to_dict()
    doc["provenance"] = provenance(args, {"model": args.model, "stats": args.stats},
                                   calibration_hash=stats.content_hash)
    write_json(args.out, doc)
    print("layer ranking (drop dB): " + ", ".join(
        f"{j}:{report.drops[j]:.4f}" for j in report.order))


def cmd_select_dre(args):
    report = LraReport.from_dict(read_json(args.lra))
    plan = _load_plan(args.plan)
    if len(report.drops) != len(plan):
        raise DatasetError("LRA report and plan cover different layer counts")
    selected = select_dre_layers(report, args.k)
    plan = apply_dre(plan, selected, args.k)
    plan.provenance["dre_inputs"] = {"lra": file_hash(args.lra), "plan": file_hash(args.plan)}
    write_json(args.out, plan.to_dict())
    parts = build_schedule(plan)
    print(f"K={args.k}: DRE on layers {sorted(selected)}; "
          f"{len(parts)} partitions, {len(parts) - 1} switches -> {args.out}")


def cmd_bops(args):
    model = load_model(args.model)
    plan = _load_plan(args.plan)
    bits = plan.bits if plan else [args.uniform] * len(model.quantizable_layers)
    report = get_bops(model, bits, args.input_size)
    print(report.table())
    if args.out:
        doc = report.to_dict()
        doc["bits"] = bits
        doc["input_size"] = list(args.input_size)
        doc["provenance"] = provenance(args, {"model": args.model, "plan": args.plan})
        write_json(args.out, doc)


def cmd_upscale(args):
    model = load_model(args.model)
    plan = _load_plan(args.plan)
    image = load_image(args.input)
    out, stats = upscale_image(model, plan, image, args.patch, args.threads)
    save_image(out, args.output)
    if args.stats_out:
        doc = stats.to_dict()
        doc["provenance"] = provenance(args, {"model": args.model, "plan": args.plan,
                                              "input": args.input})
        write_json(args.stats_out, doc)
    print(f"{image.width}x{image.height} -> {out.width}x{out.height}, {stats.tiles} tiles, "
          f"{stats.switches} switches -> {args.output}")


def cmd_eval(args):
    model = load_model(args.model)
    plan = _load_plan(args.plan)
    samples = _samples(args, model)
    report = evaluate_dataset(model, plan, samples, args.convention, args.shave, args.patch,
                              args.threads)
    report["provenance"] = provenance(args, {"model": args.model, "plan": args.plan,
                                             "data": args.data})
    write_json(args.out, report)
    mp = report["mean_psnr"]
    mp = mp if isinstance(mp, str) else f"{mp:.3f}"
    print(f"{len(samples)} images: PSNR {mp} dB, SSIM {report['mean_ssim']:.4f}, "
          f"BOPs {report['bops']['total']}, switches {report['run']['switches']} "
          f"-> {args.out}")


def cmd_compare(args):
    model = load_model(args.model)
    stats = _load_stats(args.stats)
    h = _harness(args, model, stats)
    wl = quantsr_wlopt(h, args.wordlengths)
    budget = wl.evaluations
    rows = [{"optimizer": "wlopt", "runs": 1, "budget": budget,
             "mean_conv_reduction": wl.conv_reduction, "feasible_runs": int(wl.feasible),
             "evaluations": [wl.evaluations], "results": [_summary(wl)]}]
    for name in ("sa", "ga", "rs"):
        results = []
        for r in range(args.runs):
            h.budget = SearchBudget()
            results.append(run_optimizer(name, h, args.wordlengths, max(budget, h.n_layers + 1),
                                         args.seed + r))
        feasible = [x for x in results if x.feasible]
        rows.append({
            "optimizer": name, "runs": args.runs, "budget": max(budget, h.n_layers + 1),
            "mean_conv_reduction": (sum(x.conv_reduction for x in feasible) / len(feasible)
                                    if feasible else None),
            "feasible_runs": len(feasible),
            "evaluations": [x.evaluations for x in results],
            "results": [_summary(x) for x in results],
        })
    best_baseline = max((r["mean_conv_reduction"] or 0.0) for r in rows[1:])
    doc = {
        "format": "hybridsr-comparison", "version": 1, "epsilon": args.epsilon,
        "reference": h.reference_name, "rows": rows,
        "wlopt_at_least_baselines": wl.feasible and wl.conv_reduction >= best_baseline,
        "provenance": provenance(args, {"model": args.model, "stats": args.stats},
                                 calibration_hash=stats.content_hash),
    }
    write_json(args.out, doc)
    print(f"{'optimizer':<10} {'reduction':>10} {'feasible':>9} {'evals':>6}")
    for r in rows:
        red = r["mean_conv_reduction"]
        red = f"{red:.3f}x" if red is not None else "-"
        print(f"{r['optimizer']:<10} {red:>10} {r['feasible_runs']:>4}/{r['runs']:<4} "
              f"{r['budget']:>6}")


def _summary(result):
    return {k: v for k, v in result.to_dict().items() if k != "log"}


# --------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="hybridsr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"hybridsr {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def data_opts(sp):
        sp.add_argument("--data", required=True, help="dataset dir with HR/ (and LR/)")
        sp.add_argument("--degrade", default="bicubic", choices=["bicubic"],
                        help="degradation used when LR/ is absent")

    def metric_opts(sp):
        sp.add_argument("--convention", default="y_channel", choices=CONVENTIONS)
        sp.add_argument("--shave", type=int, default=None,
                        help="border crop in pixels (default: upscale factor)")

    def search_opts(sp):
        sp.add_argument("--model", required=True)
        sp.add_argument("--stats", required=True)
        data_opts(sp)
        metric_opts(sp)
        sp.add_argument("--epsilon", type=parse_epsilon, default=DEFAULT_EPSILON)
        sp.add_argument("--wordlengths", type=parse_wordlengths, default=[8, 16])
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=1)

    sp = sub.add_parser("gen-model", help="write a fixture model")
    sp.add_argument("--kind", choices=["bicubic", "bilinear", "synthetic", "wide-range"],
                    default="bicubic")
    sp.add_argument("--scale", type=int, default=2)
    sp.add_argument("--depth", type=int, default=4)
    sp.add_argument("--channels", type=int, default=8)
    sp.add_argument("--image-channels", type=int, default=1, choices=[1, 3])
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_model)

    sp = sub.add_parser("gen-images", help="write a synthetic HR dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=10)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--channels", type=int, default=1, choices=[1, 3])
    sp.add_argument("--scale", type=int, default=2, help="HR is cropped to a multiple")
    sp.add_argument("--low", type=float, default=0.0)
    sp.add_argument("--high", type=float, default=1.0)
    sp.add_argument("--with-lr", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gen_images)

    sp = sub.add_parser("calibrate", help="gather activation ranges")
    sp.add_argument("--model", required=True)
    data_opts(sp)
    sp.add_argument("--fraction", type=float, default=0.1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("optimize", help="choose per-layer wordlengths")
    search_opts(sp)
    sp.add_argument("--optimizer", choices=sorted(OPTIMIZERS), default="wlopt")
    sp.add_argument("--budget", type=int, default=None,
                    help="evaluation budget for sa/ga/rs (default |L|+1)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--log-out", default=None)
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("lra", help="layerwise resilience analysis")
    search_opts(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_lra)

    sp = sub.add_parser("select-dre", help="pick DRE layers and flag them in a plan")
    sp.add_argument("--lra", required=True)
    sp.add_argument("--plan", required=True)
    sp.add_argument("--k", type=parse_k, default=0.5)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_select_dre)

    sp = sub.add_parser("bops", help="precision-weighted cost of a plan")
    sp.add_argument("--model", required=True)
    sp.add_argument("--plan", default=None)
    sp.add_argument("--uniform", type=int, default=16, choices=[8, 16, 32],
                    help="wordlength for every layer when no plan is given")
    sp.add_argument("--input-size", type=parse_hw, default=(96, 96))
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_bops)

    sp = sub.add_parser("upscale", help="upscale one image")
    sp.add_argument("--model", required=True)
    sp.add_argument("--plan", default=None)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--patch", type=int, default=DEFAULT_PATCH)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--stats-out", default=None)
    sp.set_defaults(func=cmd_upscale)

    sp = sub.add_parser("eval", help="evaluate a plan on a dataset")
    sp.add_argument("--model", required=True)
    sp.add_argument("--plan", default=None)
    data_opts(sp)
    metric_opts(sp)
    sp.add_argument("--patch", type=int, default=DEFAULT_PATCH)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("compare-optimizers", help="wlopt vs SA/GA/RS at equal budget")
    search_opts(sp)
    sp.add_argument("--runs", type=int, default=10)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Infeasible as exc:
        print(json.dumps({"error": "infeasible", "message": str(exc)}), file=sys.stderr)
        return EXIT_INFEASIBLE
    except (HybridSRError, OSError, ValueError) as exc:
        code = getattr(exc, "code", "io" if isinstance(exc, OSError) else "invalid_input")
        print(json.dumps({"error": code, "message": str(exc)}), file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
