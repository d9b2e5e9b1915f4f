"""Command-line interface.

Subcommands: preprocess (CSV -> window cache), synth (synthetic task ->
window cache), train (one run), protocol (users x seeds), export-surface,
export-features, report. Exit codes: 0 success, 1 configuration error,
2 data error, 3 numerical failure.
"""

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .autodiff import NonFiniteError, backend_name
from .config import ConfigError, load_config
from .data import DataError, generate_synthetic, save_windows
from .evaluation import export_weight_surface, write_features_csv, write_weight_surface_csv
from .networks import forward_features
from .orchestrator import (
    assemble_run_data,
    compare_methods,
    load_checkpoint,
    preprocess_csv,
    run_protocol,
    run_single,
    summarize_results,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


def _add_common(parser):
    parser.add_argument("--config", required=True, help="experiment config file")
    parser.add_argument("--out", default=None, help="override output directory")
    parser.add_argument("--method", default=None,
                        help="override method (swl-adapt|dann|swl-d|swl-c|swl-s)")
    parser.add_argument("--threads", type=int, default=None, help="BLAS thread cap (default 1)")


def _load(args):
    config = load_config(args.config)
    overrides = {}
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    if getattr(args, "method", None):
        overrides["method"] = args.method
    if getattr(args, "threads", None):
        overrides["threads"] = args.threads
    if overrides:
        config = config.with_overrides(**overrides)
    return config


def cmd_preprocess(args):
    config = _load(args)
    pool, preset, stats = preprocess_csv(config)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_windows(out / "windows", [pool], preset_name=preset.name,
                 num_classes=preset.num_classes, norm_stats=stats)
    print(f"wrote {len(pool)} windows from {len(set(pool.user_ids))} users to {out / 'windows'}.*")
    return EXIT_OK


def cmd_synth(args):
    config = _load(args)
    source, target = generate_synthetic(config.data.synthetic)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_windows(out / "windows", [source, target], preset_name="synthetic",
                 num_classes=config.data.synthetic.num_classes)
    print(f"wrote {len(source)} source + {len(target)} target windows to {out / 'windows'}.*")
    return EXIT_OK


def cmd_train(args):
    config = _load(args)
    seed = args.seed if args.seed is not None else config.seeds[0]
    new_user = args.new_user if args.new_user else config.new_users[0]
    run_dir = Path(config.output_dir) / f"{config.method}_{new_user}_seed{seed}"
    report, _ = run_single(config, new_user, seed, out_dir=run_dir)
    print(f"kernel backend: {backend_name()}")
    print(f"method={config.method} user={new_user} seed={seed} "
          f"accuracy={report.accuracy:.4f} macro_f1={report.macro_f1:.4f} "
          f"a_distance={report.a_distance:.4f} "
          f"runtime={report.runtime_seconds:.1f}s")
    return EXIT_OK


def cmd_protocol(args):
    config = _load(args)
    rows, summary = run_protocol(config)
    print(f"{len(rows)} runs completed")
    for entry in summary:
        print(f"{entry['method']}: accuracy {entry['accuracy_mean']:.3f}±{entry['accuracy_std']:.3f} "
              f"macro F1 {entry['macro_f1_mean']:.3f}±{entry['macro_f1_std']:.3f} "
              f"({entry['runs']} runs)")
    return EXIT_OK


def cmd_export_surface(args):
    config = _load(args)
    bundle, _ = load_checkpoint(args.checkpoint)
    if bundle.arch.allocator_inputs != 2:
        raise ConfigError("weight surface needs a two-input allocator checkpoint")
    if args.bounds:
        c_hi, d_hi = (float(v) for v in args.bounds.split(","))
    else:
        manifest_path = Path(args.checkpoint).parent / "manifest.json"
        if not manifest_path.exists():
            raise ConfigError("no --bounds given and no run manifest next to the checkpoint")
        bounds_info = json.loads(manifest_path.read_text())["loss_bounds"]
        c_hi, d_hi = bounds_info["max_loss_cls"], bounds_info["max_loss_dom"]
    grid = export_weight_surface(bundle, ((0.0, c_hi), (0.0, d_hi)), args.resolution)
    out = Path(args.out or config.output_dir) / "weight_surface.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_weight_surface_csv(grid, out)
    print(f"wrote {args.resolution}x{args.resolution} surface to {out}")
    return EXIT_OK


def cmd_export_features(args):
    config = _load(args)
    seed = args.seed if args.seed is not None else config.seeds[0]
    new_user = args.new_user if args.new_user else config.new_users[0]
    bundle, _ = load_checkpoint(args.checkpoint)
    data = assemble_run_data(config, new_user, seed)
    out = Path(args.out or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, windows in (("source_val", data.source_val), ("target_test", data.target_test)):
        feats = forward_features(windows.data, bundle, mode="eval")
        logits = feats @ bundle.params["c.out.w"] + bundle.params["c.out.b"]
        write_features_csv(out / f"features_{name}.csv", logits, windows.labels)
    print(f"wrote pre-softmax features for {new_user} to {out}")
    return EXIT_OK


def cmd_report(args):
    results = Path(args.results)
    if not results.exists():
        raise DataError(f"results file not found: {results}")
    for entry in summarize_results(results):
        print(f"{entry['method']}: accuracy {entry['accuracy_mean']:.3f}±{entry['accuracy_std']:.3f} "
              f"macro F1 {entry['macro_f1_mean']:.3f}±{entry['macro_f1_std']:.3f} "
              f"({entry['runs']} runs)")
    if args.compare:
        a, b = args.compare
        outcome = compare_methods(results, a, b)
        t_acc, p_acc = outcome["accuracy"]
        t_f1, p_f1 = outcome["macro_f1"]
        print(f"paired t-test {a} vs {b} over {outcome['pairs']} runs: "
              f"accuracy t={t_acc:.3f} p={p_acc:.4f}; macro F1 t={t_f1:.3f} p={p_f1:.4f}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="swladapt", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="ingest a CSV into the window cache")
    _add_common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="generate the synthetic task into the window cache")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one (new user, seed) run")
    _add_common(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--new-user", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("protocol", help="run all new users x seeds and aggregate")
    _add_common(p)
    p.set_defaults(func=cmd_protocol)

    p = sub.add_parser("export-surface", help="export the allocator weight surface as CSV")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resolution", type=int, default=50)
    p.add_argument("--bounds", default=None, help="upper bounds 'cls,dom' (default: run manifest)")
    p.set_defaults(func=cmd_export_surface)

    p = sub.add_parser("export-features", help="export pre-softmax classifier features as CSV")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--new-user", default=None)
    p.set_defaults(func=cmd_export_features)

    p = sub.add_parser("report", help="summarize a results CSV, optionally with a t-test")
    p.add_argument("--results", required=True)
    p.add_argument("--compare", nargs=2, metavar=("METHOD_A", "METHOD_B"), default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
