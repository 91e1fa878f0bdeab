"""Command-line front end: dataset generation, training, grids, analysis.

Subcommands: gen, convert, train, experiment, analyze, plan, report.
Exit codes: 0 success, 2 usage/config errors, 3 data errors, 1 anything else.
Failures print one machine-readable line to stderr: `error {json}`.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness, lmm, nn, stats
from .metrics import aggregate_errors, format_mean_std
from .seeding import mix64

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_DATA = 3

DEFAULT_THRESHOLDS = {
    "mse": (0.01, 0.015, 0.05),
    "sad": (0.05, 0.075, 0.1),
}


class UsageError(ValueError):
    pass


class DataError(ValueError):
    pass


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(
        "error " + json.dumps({"kind": kind, "message": message}) + "\n"
    )
    return code


def _parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise UsageError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _load_config(args) -> harness.ExperimentConfig:
    mapping: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file {path} does not exist")
        try:
            mapping = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}")
    for item in getattr(args, "set", None) or []:
        key, value = _parse_override(item)
        mapping[key] = value
    if getattr(args, "seed", None) is not None:
        mapping["master_seed"] = args.seed
    try:
        return harness.ExperimentConfig.from_mapping(mapping)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad configuration: {exc}")


def _load_bundle(args) -> lmm.HsiBundle:
    path = getattr(args, "data", None)
    if not path:
        raise UsageError("--data is required")
    try:
        return lmm.load_bundle(path)
    except lmm.FormatError as exc:
        raise DataError(f"cannot load bundle {path}: {exc}")


def _cmd_gen(args) -> int:
    # mix64 splits the one user seed into independent streams for the
    # endmember curves, the abundances, and the noise
    w = lmm.generate_endmembers(
        args.bands, args.endmembers, smoothness=args.smoothness, seed=args.seed
    )
    if args.width is not None and args.height is not None:
        pixels = args.width * args.height
    else:
        pixels = args.pixels
    a = lmm.sample_abundances(
        args.endmembers,
        pixels,
        concentration=np.full(args.endmembers, args.concentration),
        pure_fraction=args.pure_fraction,
        seed=mix64(args.seed, 1),
    )
    bundle = lmm.synthesize(
        w, a, lmm.NoiseSpec(args.noise_sigma),
        seed=mix64(args.seed, 2),
        name=args.name, width=args.width, height=args.height,
    )
    lmm.save_bundle(bundle, args.out)
    print(f"wrote bundle {args.out} ({bundle.bands} bands, "
          f"{bundle.pixel_count} pixels, {args.endmembers} endmembers)")
    return EXIT_OK


def _cmd_convert(args) -> int:
    if not Path(args.csv).exists():
        raise DataError(f"CSV file {args.csv} does not exist")
    try:
        bundle = lmm.bundle_from_csv(
            args.csv, name=args.name, width=args.width, height=args.height
        )
    except lmm.FormatError as exc:
        raise DataError(str(exc))
    lmm.save_bundle(bundle, args.out)
    print(f"wrote bundle {args.out} ({bundle.bands} bands, {bundle.pixel_count} pixels)")
    return EXIT_OK


def _require_ground_truth(config, bundle) -> None:
    if bundle.ground_truth is None and config.latent_dim is None:
        raise DataError(
            "bundle has no ground truth; set the 'endmembers' config key to train"
        )


def _cmd_train(args) -> int:
    config = _load_config(args)
    bundle = _load_bundle(args)
    _require_ground_truth(config, bundle)
    init_seed, run_seed = harness.grid_seeds(config.master_seed, 1, 1)
    if args.init_seed is not None:
        init_seed = args.init_seed
    if args.run_seed is not None:
        run_seed = args.run_seed
    net, record, trace = harness.train_once(config, bundle, init_seed, run_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace.to_csv(out / "trace.csv")
    nn.save_checkpoint(net, out / "network.ckpt")
    record = replace(record, trace_file="trace.csv")
    harness.write_records(out / "record.jsonl", [record], config)
    status = "diverged" if record.diverged else f"recon_rmse={record.recon_rmse:.6g}"
    print(f"trained 1 model: {status}; artifacts in {out}")
    return EXIT_OK


def _cmd_experiment(args) -> int:
    config = _load_config(args)
    bundle = _load_bundle(args)
    _require_ground_truth(config, bundle)
    records = harness.run_experiment(config, bundle, out_dir=args.out, jobs=args.jobs)
    diverged = sum(r.diverged for r in records)
    print(f"grid complete: {len(records)} runs ({diverged} diverged); "
          f"records in {Path(args.out) / 'records.jsonl'}")
    return EXIT_OK


def _read_records(args):
    path = Path(args.records)
    if not path.exists():
        raise DataError(f"record file {path} does not exist")
    try:
        return harness.read_records(path)
    except (ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot parse record file {path}: {exc}")


def _cmd_analyze(args) -> int:
    records, _meta = _read_records(args)
    try:
        grouped = stats.group_scores(records, args.metric)
    except ValueError as exc:
        raise DataError(str(exc))
    report = stats.analyze_grouped(grouped, alpha=args.alpha, metric=args.metric)
    files = stats.write_stat_report(report, args.out)
    verdict = "rejected" if report.rejected else "not rejected"
    print(f"levene W={report.levene_stat:.6g} p={report.levene_p:.6g}")
    print(f"kruskal-wallis H={report.kw_h:.6g} p={report.kw_p:.6g} "
          f"log_p={report.kw_log_p:.6g} ({verdict} at alpha={report.alpha})")
    if report.ph_ratio is not None:
        print(f"conover-iman significant-pair ratio: {report.ph_ratio:.4f}")
    else:
        print("conover-iman not run: H0 was not rejected")
    print(f"wrote {', '.join(str(f) for f in files)}")
    return EXIT_OK


def _cmd_plan(args) -> int:
    if args.p_hat is not None:
        p_hat = args.p_hat
        threshold = args.threshold if args.threshold is not None else float("nan")
    else:
        if args.records is None or args.threshold is None:
            raise UsageError("plan needs either --p-hat or --records with --threshold")
        records, _ = _read_records(args)
        p_hat = stats.estimate_success_prob(records, args.metric, args.threshold)
        threshold = args.threshold
    try:
        n_req = stats.required_trials(p_hat, args.confidence)
    except stats.UnreachableThresholdError as exc:
        raise DataError(str(exc))
    print(f"p_hat={p_hat:.6g} threshold={threshold:.6g} "
          f"confidence={args.confidence:.6g}")
    print(f"n_req={n_req}")
    return EXIT_OK


def _freedman_diaconis_bins(values: np.ndarray, override: int | None) -> int:
    if override is not None:
        return max(1, override)
    v = values[np.isfinite(values)]
    if v.size < 2:
        return 1
    iqr = float(np.percentile(v, 75) - np.percentile(v, 25))
    span = float(v.max() - v.min())
    if iqr <= 0 or span <= 0:
        return 1
    width = 2.0 * iqr / v.size ** (1.0 / 3.0)
    return max(1, int(np.ceil(span / width)))


def emit_report(records, metric: str, out_dir, alpha: float = 0.05,
                thresholds=None, confidence: float = 0.95,
                bins: int | None = None) -> list[Path]:
    """Write histogram.csv, trials.csv, summary.txt, and the stat report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    values = stats.metric_values(records, metric)
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        raise DataError("all runs diverged; nothing to report")

    n_bins = _freedman_diaconis_bins(finite, bins)
    counts, edges = np.histogram(finite, bins=n_bins)
    hist_path = out / "histogram.csv"
    with open(hist_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "count"])
        for i, c in enumerate(counts):
            writer.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(c)])
    written.append(hist_path)

    trials_path = out / "trials.csv"
    with open(trials_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "p_hat", "n_req", "reachable"])
        for t in thresholds or ():
            p_hat = stats.estimate_success_prob(records, metric, t)
            if p_hat > 0:
                writer.writerow(
                    [repr(float(t)), repr(p_hat),
                     stats.required_trials(p_hat, confidence), True]
                )
            else:
                writer.writerow([repr(float(t)), repr(p_hat), "", False])
    written.append(trials_path)

    lines = [
        f"records: {len(values)}",
        f"diverged: {int(np.sum(~np.isfinite(values)))}",
        f"metric: {metric}",
        f"{metric}_mean_std: {format_mean_std(float(finite.mean()), float(finite.std(ddof=1)) if finite.size > 1 else 0.0)}",
    ]
    try:
        summary = aggregate_errors(records)
        lines.append(
            "abundance_rmse: "
            + format_mean_std(summary.abundance_mean, summary.abundance_std)
        )
        lines.append(
            "endmember_sad: "
            + format_mean_std(summary.endmember_mean, summary.endmember_std)
        )
    except ValueError:
        lines.append("abundance_rmse: unavailable (no scored ground truth)")
    summary_path = out / "summary.txt"
    summary_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(summary_path)

    try:
        grouped = stats.group_scores(records, metric)
    except ValueError:
        return written
    report = stats.analyze_grouped(grouped, alpha=alpha, metric=metric)
    written.extend(stats.write_stat_report(report, out))
    return written


def _cmd_report(args) -> int:
    records, meta = _read_records(args)
    thresholds = args.thresholds
    if thresholds is None:
        loss = (meta.get("config") or {}).get("loss", "mse")
        thresholds = DEFAULT_THRESHOLDS.get(loss, DEFAULT_THRESHOLDS["mse"])
    files = emit_report(
        records, args.metric, args.out, alpha=args.alpha,
        thresholds=thresholds, confidence=args.confidence, bins=args.bins,
    )
    print(f"wrote {', '.join(str(f) for f in files)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unmixlab",
        description="Unmixing autoencoders with a training-stability bench",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--bands", type=int, default=50)
    p.add_argument("--endmembers", type=int, default=3)
    p.add_argument("--pixels", type=int, default=2000)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--pure-fraction", type=float, default=0.1)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--smoothness", type=int, default=7)
    p.add_argument("--concentration", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="synthetic")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("convert", help="ingest a CSV (one pixel per row)")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--name")
    p.set_defaults(func=_cmd_convert)

    p = sub.add_parser("train", help="run one training cell")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override master_seed")
    p.add_argument("--init-seed", type=int)
    p.add_argument("--run-seed", type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("experiment", help="run the N x k grid")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override master_seed")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("analyze", help="test initialization dependence")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metric", default="recon_rmse", choices=stats.METRIC_NAMES)
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("plan", help="size the retry count for a threshold")
    p.add_argument("--records")
    p.add_argument("--p-hat", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--metric", default="recon_rmse", choices=stats.METRIC_NAMES)
    p.add_argument("--confidence", type=float, default=0.95)
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser("report", help="emit histogram, trials, and summary files")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metric", default="recon_rmse", choices=stats.METRIC_NAMES)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--confidence", type=float, default=0.95)
    p.add_argument("--thresholds", type=float, nargs="+")
    p.add_argument("--bins", type=int)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except DataError as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    except (lmm.DimensionError, lmm.FormatError) as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    except ValueError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except Exception as exc:  # noqa: BLE001 - boundary of the CLI
        return _fail(EXIT_ERROR, "internal", f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
