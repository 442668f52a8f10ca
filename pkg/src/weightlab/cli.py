"""weightlab command-line interface.

Subcommands: inspect, classify, synth, merge, compare-delta, depth-trend,
toy-adapt, hist. Reports go to ``--out`` (default stdout) as JSON or CSV.

Exit codes: 0 success, 1 internal error, 2 input error, 3 empty result.
Per-tensor work uses ``WEIGHTLAB_THREADS`` worker threads (default 1);
output order never depends on it.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .errors import EmptyResult, InputError, WeightLabError
from .merge import MergeMode, MergeOptions, NonFloatPolicy, merge_to_file, task_vectors
from .moments import Center, FilterSpec, ascii_histogram, histogram, pooled_summary, summarize
from .noise_adapt import (
    ToyTaskSpec,
    checkpoint_deltas,
    delta_sigma_report,
    depth_trend,
    group_by_layer,
    toy_train,
)
from .report import Report, write_text
from .shapes import ClassifierThresholds, calibrate_thresholds, classify, extract_features
from .synth import SynthSpec, gen_wstar, noisy_levels, regime_report, sweep_for_calibration
from .tensor_io import SkipNotice, TensorRecord, iter_tensors, read_header, write_model

log = logging.getLogger("weightlab")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_EMPTY = 0, 1, 2, 3


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("WEIGHTLAB_THREADS", "1")))
    except ValueError:
        return 1


def _pmap(fn, items):
    items = list(items)
    n = _threads()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


def _load_selection(path, pattern, report: Report) -> list[TensorRecord]:
    index = read_header(path)
    report.add_input(path)
    records = []
    for item in iter_tensors(index, pattern):
        if isinstance(item, SkipNotice):
            report.warnings.append(f"skipped {item.name}: unsupported dtype {item.dtype}")
            continue
        if item.values.size == 0:
            report.warnings.append(f"skipped {item.name}: empty tensor")
            continue
        records.append(item)
    if not records:
        raise EmptyResult(f"no float tensors in {path} match {pattern!r}")
    return sorted(records, key=lambda r: r.name)


def _emit(report: Report, args) -> None:
    text = report.to_csv() if args.format == "csv" else report.to_json()
    write_text(text, args.out)


# ---------------------------------------------------------------------------


def cmd_inspect(args) -> Report:
    report = Report("inspect")
    records = _load_selection(args.file, args.pattern, report)
    spec = FilterSpec(
        sigma_k=None if args.no_sigma_filter else args.sigma_k,
        magnitude_min=args.min_magnitude,
        center=Center(args.center),
    )

    summaries = _pmap(lambda rec: summarize(rec.values, spec), records)
    for rec, s in zip(records, summaries):
        if s.nonfinite_count:
            report.warnings.append(f"{rec.name}: {s.nonfinite_count} non-finite values excluded")
        report.rows.append({"name": rec.name, "dtype": rec.source_dtype, **s.to_dict()})
    n = len(summaries)
    mean_row = {
        "retain_ratio": sum(s.retain_ratio for s in summaries) / n,
        "skewness": _avg([s.skewness for s in summaries]),
        "kurtosis": _avg([s.kurtosis for s in summaries]),
    }
    report.rows.append({"name": "__mean__", "dtype": "", **mean_row})
    report.rows.append({"name": "__pooled__", "dtype": "", **pooled_summary(summaries).to_dict()})
    report.extra["filter"] = {
        "sigma_k": spec.sigma_k,
        "magnitude_min": spec.magnitude_min,
        "center": spec.center.value,
    }
    return report


def _avg(vals):
    vals = [v for v in vals if v is not None]
    return sum(vals) / len(vals) if vals else None


def _thresholds(path, report: Report) -> ClassifierThresholds:
    if path is None:
        report.warnings.append("no thresholds file given; using built-in defaults")
        return ClassifierThresholds()
    if not Path(path).exists():
        report.warnings.append(f"thresholds file {path} not found; using built-in defaults")
        return ClassifierThresholds()
    report.add_input(path)
    try:
        return ClassifierThresholds.load(path)
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"bad thresholds file {path}: {exc}") from None


def cmd_classify(args) -> Report:
    report = Report("classify")
    records = _load_selection(args.file, args.pattern, report)
    thresholds = _thresholds(args.thresholds, report)

    def one(rec):
        try:
            return extract_features(rec.values, args.alpha)
        except InputError as exc:
            return exc

    for rec, feats in zip(records, _pmap(one, records)):
        if isinstance(feats, Exception):
            report.warnings.append(f"{rec.name}: {feats}")
            continue
        report.rows.append(
            {"name": rec.name, **feats.to_dict(), "shape": classify(feats, thresholds).value}
        )
    report.extra["thresholds"] = thresholds.to_dict()
    return report


def cmd_synth(args) -> Report:
    report = Report("synth")
    base = SynthSpec()
    if args.config:
        report.add_input(args.config)
        base = SynthSpec.load(args.config)
    overrides = {
        "seed": args.seed,
        "total_points": args.total_points,
        "nonzero_points": args.nonzero_points,
        "noise_levels": tuple(args.noise_levels) if args.noise_levels else None,
        "outlier_signs": args.outlier_signs,
    }
    spec = SynthSpec(**{**base.to_dict(), **{k: v for k, v in overrides.items() if v is not None}})
    spec.validate()
    thresholds = _thresholds(args.thresholds, report) if args.thresholds else ClassifierThresholds()

    wstar = gen_wstar(spec)
    report.extra["nonzero_wstar"] = int((wstar != 0).sum())
    reports = []
    ckpt = []
    for sigma, x in noisy_levels(spec, wstar):
        reports.append(regime_report(x, sigma, thresholds, args.alpha, args.bins))
        if args.write_checkpoint:
            ckpt.append(TensorRecord(f"noise_{sigma:g}", x.shape, x, args.checkpoint_dtype))
    del wstar

    if args.calibrate:
        cal = calibrate_thresholds(sweep_for_calibration(reports))
        report.extra["calibrated_thresholds"] = cal.to_dict()
        for r in reports:
            r.shape = classify(r.features, cal)
        if args.save_thresholds:
            cal.save(args.save_thresholds)
    if args.write_checkpoint:
        write_model(ckpt, args.write_checkpoint)
    if args.hist_dir:
        out = Path(args.hist_dir)
        out.mkdir(parents=True, exist_ok=True)
        for r in reports:
            (out / f"hist_noise_{r.noise_sigma:g}.csv").write_text(r.histogram.to_csv())
    report.rows = [r.to_dict() for r in reports]
    report.extra["spec"] = spec.to_dict()
    return report


def cmd_merge(args) -> Report:
    report = Report("merge")
    base = read_header(args.base)
    report.add_input(args.base)
    models = []
    for path in args.models:
        models.append(read_header(path))
        report.add_input(path)
    tv = task_vectors(base, models, names=[str(p) for p in args.models], cache=False)
    opts = MergeOptions(
        t=args.t,
        mode=MergeMode(args.mode),
        center=Center(args.center),
        non_float_policy=NonFloatPolicy(args.non_float),
    )
    groups = merge_to_file(tv, opts, args.output, force_dtype="F32" if args.force_f32 else None)
    for name in tv.passthrough:
        report.warnings.append(f"{name}: non-float tensor copied from base")
    report.rows = [g.to_dict() for g in groups]
    report.extra.update(
        {"mode": opts.mode.value, "t": opts.t, "center": opts.center.value, "models": tv.names}
    )
    return report


def cmd_compare_delta(args) -> Report:
    report = Report("compare-delta")
    base, a, b = (read_header(p) for p in (args.base, args.a, args.b))
    for p in (args.base, args.a, args.b):
        report.add_input(p)
    da = checkpoint_deltas(base, a, args.pattern)
    db = checkpoint_deltas(base, b, args.pattern)
    common = sorted(set(da) & set(db))
    for name in sorted(set(da) ^ set(db)):
        report.warnings.append(f"{name}: present in only one fine-tuned model; skipped")
    if not common:
        raise EmptyResult("no tensors shared by both fine-tuned models")
    res = delta_sigma_report({k: da[k] for k in common}, {k: db[k] for k in common})
    report.rows = res.to_rows()
    report.extra["mean_abs_diff"] = res.mean_abs_diff
    return report


def cmd_depth_trend(args) -> Report:
    report = Report("depth-trend")
    base, ft = read_header(args.base), read_header(args.ft)
    report.add_input(args.base)
    report.add_input(args.ft)
    layers = group_by_layer(checkpoint_deltas(base, ft), args.layer_regex)
    if not layers:
        raise EmptyResult(f"no tensors match layer regex {args.layer_regex!r}")
    trend = depth_trend(layers, args.exclude_ends)
    d = trend.to_dict()
    report.rows = d.pop("per_layer_sigma")
    report.extra.update(d)
    if trend.degenerate:
        report.warnings.append("constant sigma across layers; rank correlation undefined, reported as 0")
    return report


def cmd_toy_adapt(args) -> Report:
    report = Report("toy-adapt")
    in_dim, out_dim = args.dims
    task = ToyTaskSpec(
        in_dim=in_dim,
        out_dim=out_dim,
        rank=args.rank,
        n_samples=args.samples or max(4 * in_dim, in_dim),
        sigma_true=args.sigma_true,
        seed=args.seed,
        learn_lora=args.mode == "scalar+lora",
        learning_rate=args.lr,
        max_steps=args.max_steps,
        tol=args.tol,
        delta_seed=args.delta_seed,
    )
    res = toy_train(task)
    row = res.to_dict()
    if not args.with_curve:
        row.pop("loss_curve")
    row.pop("a_mat", None)
    row.pop("b_mat", None)
    report.rows = [{"mode": args.mode, "sigma_true": args.sigma_true, "seed": args.seed, **row}]
    return report


def cmd_hist(args) -> Report:
    report = Report("hist")
    records = _load_selection(args.file, args.pattern, report)
    if args.tensor:
        records = [r for r in records if r.name == args.tensor]
        if not records:
            raise EmptyResult(f"tensor {args.tensor!r} not found")
    values = np.concatenate([r.values.ravel() for r in records])
    hist = histogram(values, args.bins, tuple(args.range) if args.range else None)
    report.rows = [
        {"bin_center": float(c), "count": int(n)} for c, n in zip(hist.bin_centers, hist.counts)
    ]
    report.extra.update(
        {"tensors": [r.name for r in records], "underflow": hist.underflow, "overflow": hist.overflow}
    )
    if args.ascii:
        print(ascii_histogram(hist), file=sys.stderr)
    return report


# ---------------------------------------------------------------------------


def _common(p, default_format="json"):
    p.add_argument("--out", default=None, help="output file (default: stdout)")
    p.add_argument("--format", choices=("json", "csv"), default=default_format)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weightlab", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="per-tensor distribution statistics")
    p.add_argument("file")
    p.add_argument("--pattern", default=None, help="regex selecting tensor names")
    p.add_argument("--sigma-k", type=float, default=3.0)
    p.add_argument("--no-sigma-filter", action="store_true")
    p.add_argument("--min-magnitude", type=float, default=None)
    p.add_argument("--center", choices=[c.value for c in Center], default=Center.SAMPLE_MEAN.value)
    _common(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("classify", help="assign Gaussian/Sharp/InvertedT/Line shapes")
    p.add_argument("file")
    p.add_argument("--thresholds", default=None, help="thresholds JSON file")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--pattern", default=None)
    _common(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("synth", help="synthetic W* + noise regime sweep")
    p.add_argument("--config", default=None, help="SynthSpec JSON file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--total-points", type=int, default=None)
    p.add_argument("--nonzero-points", type=int, default=None)
    p.add_argument("--noise-levels", type=float, nargs="+", default=None)
    p.add_argument("--outlier-signs", choices=("symmetric", "positive"), default=None)
    p.add_argument("--thresholds", default=None)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--bins", type=int, default=200)
    p.add_argument("--calibrate", action="store_true", help="fit thresholds to the sweep labels")
    p.add_argument("--save-thresholds", default=None)
    p.add_argument("--hist-dir", default=None, help="write one histogram CSV per noise level")
    p.add_argument("--write-checkpoint", default=None, help="save noisy levels as a safetensors file")
    p.add_argument("--checkpoint-dtype", choices=("F64", "F32", "F16", "BF16"), default="F32")
    _common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("merge", help="merge fine-tuned checkpoints")
    p.add_argument("--base", required=True)
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--t", type=float, default=2.0)
    p.add_argument("--mode", choices=[m.value for m in MergeMode], default=MergeMode.OUTLIER_AWARE.value)
    p.add_argument("--center", choices=[c.value for c in Center], default=Center.ZERO.value)
    p.add_argument("--non-float", choices=[c.value for c in NonFloatPolicy], default=NonFloatPolicy.COPY_BASE.value)
    p.add_argument("--force-f32", action="store_true", help="write every float tensor as F32")
    p.add_argument("--out", dest="output", required=True, help="merged safetensors file")
    p.add_argument("--report", dest="out", default=None, help="report file (default: stdout)")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("compare-delta", help="per-layer std of two task vectors")
    p.add_argument("--base", required=True)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--pattern", default=None)
    _common(p)
    p.set_defaults(func=cmd_compare_delta)

    p = sub.add_parser("depth-trend", help="delta std versus layer depth")
    p.add_argument("--base", required=True)
    p.add_argument("--ft", required=True)
    p.add_argument("--layer-regex", default=r"layers\.(\d+)\.")
    p.add_argument("--exclude-ends", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_depth_trend)

    p = sub.add_parser("toy-adapt", help="train the noise scalar on a toy regression")
    p.add_argument("--mode", choices=("scalar", "scalar+lora"), default="scalar")
    p.add_argument("--sigma-true", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta-seed", type=int, default=None)
    p.add_argument("--dims", type=int, nargs=2, metavar=("IN", "OUT"), default=(16, 12))
    p.add_argument("--rank", type=int, default=2)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--max-steps", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--with-curve", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_toy_adapt)

    p = sub.add_parser("hist", help="histogram of one tensor or a pooled selection")
    p.add_argument("file")
    p.add_argument("--tensor", default=None)
    p.add_argument("--pattern", default=None)
    p.add_argument("--bins", type=int, default=100)
    p.add_argument("--range", type=float, nargs=2, metavar=("LO", "HI"), default=None)
    p.add_argument("--ascii", action="store_true", help="also print a text histogram to stderr")
    _common(p, default_format="csv")
    p.set_defaults(func=cmd_hist)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        report = args.func(args)
        _emit(report, args)
    except EmptyResult as exc:
        print(f"weightlab: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (InputError, OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"weightlab: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except WeightLabError as exc:
        print(f"weightlab: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # pragma: no cover - last-resort guard
        log.exception("internal error")
        print(f"weightlab: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
