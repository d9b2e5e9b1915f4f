"""Run management: single adaptation runs, multi-user multi-seed protocols,
checkpoints, and results aggregation."""

import csv
import json
import time
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import ConfigError, resolve_architecture
from .data import (
    PRESETS,
    DataError,
    WindowSet,
    clean_and_interpolate,
    filter_transition_classes,
    generate_synthetic,
    load_csv,
    load_windows,
    make_splits,
    merge_window_sets,
    normalize_recordings,
    segment,
)
from .evaluation import (
    ConvergenceTrace,
    MetricsReport,
    accuracy,
    macro_f1,
    proxy_a_distance,
)
from .networks import (
    ArchitectureSpec,
    NetworkBundle,
    forward_allocator,
    forward_class_probs,
    forward_domain_prob,
    forward_features,
    init_bundle,
)
from .training import Trainer, normalize_weights

RESULTS_HEADER = ["method", "new_user", "seed", "accuracy", "macro_f1", "a_distance", "runtime_seconds"]

CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# checkpointing

def save_checkpoint(bundle, path, step=0):
    """Manifest (text) plus raw little-endian float payload in manifest order."""
    precision = "f4" if bundle.dtype == np.float32 else "f8"
    manifest = {
        "version": CHECKPOINT_VERSION,
        "precision": precision,
        "step": int(step),
        "architecture": asdict(bundle.arch),
        "params": [{"name": n, "shape": list(v.shape)} for n, v in bundle.params.items()],
        "bn_state": [{"name": n, "shape": list(v.shape)} for n, v in bundle.bn_state.items()],
    }
    payload = bytearray()
    for group in (bundle.params, bundle.bn_state):
        for value in group.values():
            payload.extend(np.ascontiguousarray(value, dtype="<" + precision).tobytes())
    path = Path(path)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    path.with_suffix(".bin").write_bytes(bytes(payload))


def load_checkpoint(path, expected_num_classes=None):
    """Rebuild a bundle from a checkpoint; validates shapes and class count."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"checkpoint version mismatch: {manifest.get('version')}")
    arch_kwargs = manifest["architecture"]
    arch_kwargs["conv_filters"] = tuple(arch_kwargs["conv_filters"])
    arch_kwargs["conv_kernels"] = tuple(arch_kwargs["conv_kernels"])
    arch_kwargs["conv_strides"] = tuple(arch_kwargs["conv_strides"])
    arch_kwargs["disc_hidden"] = tuple(arch_kwargs["disc_hidden"])
    arch = ArchitectureSpec(**arch_kwargs)
    precision = manifest["precision"]
    dtype = np.float32 if precision == "f4" else np.float64
    raw = path.with_suffix(".bin").read_bytes()
    itemsize = 4 if precision == "f4" else 8
    offset = 0
    params, bn_state = {}, {}
    for target, entries in ((params, manifest["params"]), (bn_state, manifest["bn_state"])):
        for entry in entries:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) * itemsize if shape else itemsize
            if offset + count > len(raw):
                raise ConfigError(f"truncated checkpoint payload at parameter {entry['name']!r}")
            target[entry["name"]] = (
                np.frombuffer(raw[offset : offset + count], dtype="<" + precision)
                .reshape(shape).astype(dtype)
            )
            offset += count
    if offset != len(raw):
        raise ConfigError("checkpoint payload size mismatch")
    bundle = NetworkBundle(arch=arch, params=params, bn_state=bn_state, dtype=np.dtype(dtype))
    reference = init_bundle(arch, seed=0, dtype=dtype, include_allocator="w.out.w" in params)
    for name, value in reference.params.items():
        if name not in params:
            raise ConfigError(f"checkpoint missing parameter {name!r}")
        if params[name].shape != value.shape:
            raise ConfigError(
                f"shape mismatch for parameter {name!r}: "
                f"{list(params[name].shape)} != {list(value.shape)}"
            )
    if expected_num_classes is not None and arch.num_classes != expected_num_classes:
        raise ConfigError(
            f"checkpoint parameter 'c.out.b' has {arch.num_classes} classes, "
            f"expected {expected_num_classes}"
        )
    return bundle, manifest["step"]


# ---------------------------------------------------------------------------
# data assembly

def _stable_seed(seed, new_user, salt):
    return (seed * 1000003 + zlib.crc32(new_user.encode()) + salt) % (2**31 - 1)


@dataclass
class RunData:
    source_train: WindowSet
    source_val: WindowSet
    target_adapt: WindowSet
    target_test: WindowSet
    num_classes: int


def preprocess_csv(config):
    """CSV -> cleaned, normalized, windowed pool (one set, all users)."""
    d = config.data
    preset = PRESETS.get(d.preset)
    if preset is None:
        raise ConfigError(f"csv ingestion needs a known preset, got {d.preset!r}")
    label_space = preset.num_classes + len(preset.transition_classes)
    recordings = load_csv(d.csv_path, preset.n_channels, label_space, preset.rate_hz)
    recordings = [clean_and_interpolate(r) for r in recordings]
    recordings, stats = normalize_recordings(recordings, mode=d.normalization,
                                             source_users=None if d.normalization == "global" else [])
    sets = [segment(r, preset.window_seconds, preset.overlap) for r in recordings]
    pool = merge_window_sets(sets, domain=0)
    return pool, preset, stats


def list_users(config):
    """All user ids present in the configured data source."""
    d = config.data
    if d.source == "synthetic":
        spec = d.synthetic
        return [f"t{i}" for i in range(spec.target_users)]
    if d.source == "cache":
        sets, _ = load_windows(d.cache_path)
        return sorted({u for ws in sets for u in ws.user_ids})
    pool, _, _ = preprocess_csv(config)
    return sorted(set(pool.user_ids))


def assemble_run_data(config, new_user, seed):
    """Build the four split window sets for one (new user, seed) run."""
    d = config.data
    transition_classes = ()
    if d.source == "synthetic":
        source, target_pool = generate_synthetic(d.synthetic)
        idx = [i for i, u in enumerate(target_pool.user_ids) if u == new_user]
        if not idx:
            raise DataError(f"unknown synthetic target user {new_user!r}")
        target = target_pool.subset(idx)
        num_classes = d.synthetic.num_classes
    else:
        if d.source == "cache":
            sets, manifest = load_windows(d.cache_path)
            pool = merge_window_sets(sets, domain=0)
            num_classes = int(manifest["num_classes"])
            preset = PRESETS.get(manifest.get("preset", ""))
        else:
            pool, preset, _ = preprocess_csv(config)
            num_classes = preset.num_classes
        if preset is not None:
            transition_classes = preset.transition_classes
        users = set(pool.user_ids)
        if new_user not in users:
            raise DataError(f"unknown new user {new_user!r}; available: {sorted(users)}")
        if config.protocol == "fixed-new-user-set":
            source_users = users - set(config.new_users)
        else:
            source_users = users - {new_user}
        if not source_users:
            raise DataError("no source users left after excluding new users")
        src_idx = [i for i, u in enumerate(pool.user_ids) if u in source_users]
        tgt_idx = [i for i, u in enumerate(pool.user_ids) if u == new_user]
        source = pool.subset(src_idx)
        target = pool.subset(tgt_idx)
        source.domain, target.domain = 0, 1
    source = filter_transition_classes(source, False, transition_classes)
    splits = make_splits(len(source), len(target), _stable_seed(seed, new_user, 1))
    data = RunData(
        source_train=source.subset(splits.source_train),
        source_val=source.subset(splits.source_val),
        target_adapt=target.subset(splits.target_adapt),
        target_test=filter_transition_classes(
            target.subset(splits.target_test), False, transition_classes
        ),
        num_classes=num_classes,
    )
    return data


# ---------------------------------------------------------------------------
# single run

def _mean_test_loss(bundle, windows, labels):
    probs = forward_class_probs(forward_features(windows, bundle, mode="eval"), bundle)
    picked = probs[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.clip(picked, 1e-7, 1.0))))


def _probe_weights(trainer, probe_src, probe_src_labels, probe_tgt):
    """Current normalized weights of the fixed probe windows (inference-mode
    losses; target classification losses use pseudo-labels)."""
    bundle = trainer.bundle
    windows = np.concatenate([probe_src, probe_tgt], axis=0)
    n_src = len(probe_src_labels)
    feats = forward_features(windows, bundle, mode="eval")
    probs = forward_class_probs(feats, bundle)
    tgt_pseudo = probs[n_src:].argmax(axis=1)
    labels = np.concatenate([probe_src_labels, tgt_pseudo])
    picked = probs[np.arange(len(labels)), labels]
    lc = -np.log(np.clip(picked, 1e-7, 1.0))
    p_dom = forward_domain_prob(feats, bundle).reshape(-1)
    d_tags = np.concatenate([np.zeros(n_src), np.ones(len(probe_tgt))])
    ld = -(d_tags * np.log(np.clip(p_dom, 1e-7, 1.0))
           + (1 - d_tags) * np.log(np.clip(1 - p_dom, 1e-7, 1.0)))
    if bundle.arch.allocator_inputs == 2:
        pairs = np.stack([lc, ld], axis=1)
    else:
        pairs = (lc if trainer.method == "swl-c" else ld).reshape(-1, 1)
    eta = forward_allocator(pairs.astype(bundle.dtype), bundle).reshape(-1)
    return normalize_weights(eta, d_tags, trainer.hyper.zero_guard).weights


def run_single(config, new_user, seed, out_dir=None):
    """Train one (new user, seed) run end to end and write its artifacts.

    Deterministic given (config, new_user, seed) at a fixed thread count.
    Returns the metrics report; artifacts (checkpoint, training log,
    convergence trace, manifest) land in ``out_dir`` when given.
    """
    started = time.time()
    with threadpool_limits(limits=config.threads):
        data = assemble_run_data(config, new_user, seed)
        n_channels = data.source_train.data.shape[1]
        window_len = data.source_train.data.shape[2]
        arch = resolve_architecture(config, n_channels, window_len, data.num_classes)
        bundle = init_bundle(arch, seed=_stable_seed(seed, new_user, 2))
        hyper = config.hyper
        trainer = Trainer(bundle, hyper, method=config.method)
        rng = np.random.default_rng(_stable_seed(seed, new_user, 3))

        n_probe = config.probe_count
        probe_src_idx = rng.choice(len(data.source_train), size=min(n_probe, len(data.source_train)), replace=False)
        probe_tgt_idx = rng.choice(len(data.target_adapt), size=min(n_probe, len(data.target_adapt)), replace=False)
        probe_src = data.source_train.data[probe_src_idx]
        probe_src_labels = data.source_train.labels[probe_src_idx]
        probe_tgt = data.target_adapt.data[probe_tgt_idx]
        trace = ConvergenceTrace(probe_counts=(len(probe_src_idx), len(probe_tgt_idx)))

        out_path = Path(out_dir) if out_dir else None
        log_fh = None
        if out_path is not None:
            out_path.mkdir(parents=True, exist_ok=True)
            log_fh = open(out_path / "train_log.jsonl", "w", encoding="utf-8")
        max_lc, max_ld = 0.0, 0.0
        try:
            b = hyper.batch_per_domain
            for t in range(hyper.total_steps):
                src_pick = rng.integers(0, len(data.source_train), size=b)
                tgt_pick = rng.integers(0, len(data.target_adapt), size=b)
                record = trainer.step(
                    data.source_train.data[src_pick],
                    data.source_train.labels[src_pick],
                    data.target_adapt.data[tgt_pick],
                )
                max_lc = max(max_lc, record["max_loss_cls"])
                max_ld = max(max_ld, record["max_loss_dom"])
                if log_fh is not None:
                    log_fh.write(json.dumps(record) + "\n")
                if (t + 1) % config.convergence_interval == 0:
                    test_loss = _mean_test_loss(bundle, data.target_test.data, data.target_test.labels)
                    if trainer.has_allocator:
                        weights = _probe_weights(trainer, probe_src, probe_src_labels, probe_tgt)
                    else:
                        weights = np.zeros(len(probe_src) + len(probe_tgt))
                    trace.record(t + 1, test_loss, weights, n_source=len(probe_src))
        finally:
            if log_fh is not None:
                log_fh.close()

        feats_test = forward_features(data.target_test.data, bundle, mode="eval")
        probs_test = forward_class_probs(feats_test, bundle)
        preds = probs_test.argmax(axis=1)
        feats_val = forward_features(data.source_val.data, bundle, mode="eval")
        val_preds = forward_class_probs(feats_val, bundle).argmax(axis=1)
        if min(len(feats_val), len(feats_test)) >= 20:
            a_dist = proxy_a_distance(feats_val, feats_test, seed=_stable_seed(seed, new_user, 4))
        else:
            a_dist = float("nan")
        report = MetricsReport(
            accuracy=accuracy(data.target_test.labels, preds),
            macro_f1=macro_f1(data.target_test.labels, preds, data.num_classes),
            per_class=[],
            sample_count=len(preds),
            new_user=new_user,
            seed=seed,
            a_distance=a_dist,
            validation_accuracy=accuracy(data.source_val.labels, val_preds),
            runtime_seconds=time.time() - started,
        )
        if out_path is not None:
            save_checkpoint(bundle, out_path / "checkpoint", step=trainer.t)
            trace.write_csv(out_path / "convergence.csv")
            manifest = {
                "version": __version__,
                "method": config.method,
                "new_user": new_user,
                "seed": seed,
                "status": "completed",
                "loss_bounds": {"max_loss_cls": max_lc, "max_loss_dom": max_ld},
                "metrics": {
                    "accuracy": report.accuracy,
                    "macro_f1": report.macro_f1,
                    "a_distance": report.a_distance,
                    "validation_accuracy": report.validation_accuracy,
                    "runtime_seconds": report.runtime_seconds,
                },
                "artifacts": {
                    "checkpoint": "checkpoint.json",
                    "train_log": "train_log.jsonl",
                    "convergence": "convergence.csv",
                },
            }
            (out_path / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return report, trace


def run_protocol(config):
    """Iterate new users x seeds, appending one metrics row per run.

    A failing run writes a partial-results marker and re-raises; aggregation
    happens only over completed rows.
    """
    out_root = Path(config.output_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    results_path = out_root / "results.csv"
    new_file = not results_path.exists()
    users = list(config.new_users) if config.protocol == "fixed-new-user-set" else list_users(config)
    rows = []
    with open(results_path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(RESULTS_HEADER)
        for user in users:
            for seed in config.seeds:
                run_dir = out_root / f"{config.method}_{user}_seed{seed}"
                try:
                    report, _ = run_single(config, user, seed, out_dir=run_dir)
                except Exception:
                    (out_root / "results.partial").write_text(
                        f"failed at user={user} seed={seed}\n", encoding="utf-8"
                    )
                    raise
                row = [config.method, user, seed,
                       f"{report.accuracy:.6f}", f"{report.macro_f1:.6f}",
                       f"{report.a_distance:.6f}", f"{report.runtime_seconds:.3f}"]
                writer.writerow(row)
                fh.flush()
                rows.append(row)
    summary = summarize_results(results_path)
    write_summary(summary, out_root / "summary.csv")
    return rows, summary


def summarize_results(results_path):
    """Per-method mean and std of accuracy and macro F1 over all rows."""
    by_method = {}
    with open(results_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            by_method.setdefault(row["method"], []).append(row)
    summary = []
    for method, rows in sorted(by_method.items()):
        acc = np.array([float(r["accuracy"]) for r in rows])
        f1 = np.array([float(r["macro_f1"]) for r in rows])
        summary.append({
            "method": method,
            "runs": len(rows),
            "accuracy_mean": float(acc.mean()),
            "accuracy_std": float(acc.std()),
            "macro_f1_mean": float(f1.mean()),
            "macro_f1_std": float(f1.std()),
        })
    return summary


def write_summary(summary, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "runs", "accuracy_mean", "accuracy_std",
                         "macro_f1_mean", "macro_f1_std"])
        for row in summary:
            writer.writerow([row["method"], row["runs"],
                             f"{row['accuracy_mean']:.6f}", f"{row['accuracy_std']:.6f}",
                             f"{row['macro_f1_mean']:.6f}", f"{row['macro_f1_std']:.6f}"])


def compare_methods(results_path, method_a, method_b):
    """Paired t-test between two methods on (user, seed)-aligned scores."""
    from .evaluation import paired_t_test

    scores = {}
    with open(results_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            scores.setdefault(row["method"], {})[(row["new_user"], row["seed"])] = (
                float(row["accuracy"]), float(row["macro_f1"]))
    if method_a not in scores or method_b not in scores:
        raise ConfigError(f"results do not contain both methods {method_a!r}, {method_b!r}")
    keys = sorted(set(scores[method_a]) & set(scores[method_b]))
    if len(keys) < 2:
        raise ConfigError("need at least two aligned (user, seed) runs to compare")
    acc_a = [scores[method_a][k][0] for k in keys]
    acc_b = [scores[method_b][k][0] for k in keys]
    f1_a = [scores[method_a][k][1] for k in keys]
    f1_b = [scores[method_b][k][1] for k in keys]
    return {
        "pairs": len(keys),
        "accuracy": paired_t_test(acc_a, acc_b),
        "macro_f1": paired_t_test(f1_a, f1_b),
    }
