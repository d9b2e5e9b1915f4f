"""Sensor-data pipeline: CSV ingestion, cleaning, [-1, 1] normalization,
sliding-window segmentation, per-domain splits, dataset presets, a seeded
synthetic cross-user task generator for desk-scale verification, and the
windowed-dataset cache format.
"""

import csv
import json
import math
from dataclasses import dataclass

import numpy as np


class DataError(ValueError):
    """Malformed or insufficient input data."""


UNLABELED = -1


@dataclass
class RawRecording:
    """One contiguous multichannel stream for one user.

    ``channels`` is (n_channels, n_samples) with NaN marking missing values;
    ``labels`` holds a per-timestep class index or the unlabeled marker.
    """

    user_id: str
    channels: np.ndarray
    labels: np.ndarray
    rate: float

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.channels.ndim != 2:
            raise DataError("channels must be a (n_channels, n_samples) matrix")
        if self.labels.shape[0] != self.channels.shape[1]:
            raise DataError("labels must align with samples")
        if self.rate <= 0:
            raise DataError("sampling rate must be positive")


@dataclass
class WindowSet:
    """Segmented windows of one domain: (n, channels, length) float32 data."""

    data: np.ndarray
    labels: np.ndarray
    user_ids: list
    domain: int  # 0 = source, 1 = target

    def __len__(self):
        return self.data.shape[0]

    def subset(self, indices):
        indices = np.asarray(indices)
        return WindowSet(
            data=self.data[indices],
            labels=self.labels[indices],
            user_ids=[self.user_ids[i] for i in indices],
            domain=self.domain,
        )


@dataclass(frozen=True)
class SplitPlan:
    source_train: np.ndarray
    source_val: np.ndarray
    target_adapt: np.ndarray
    target_test: np.ndarray
    seed: int


@dataclass(frozen=True)
class DatasetPreset:
    name: str
    rate_hz: float
    window_seconds: float
    overlap: float
    num_classes: int
    n_channels: int
    transition_classes: tuple = ()

    @property
    def window_len(self):
        return int(round(self.window_seconds * self.rate_hz))


PRESETS = {
    "sbhar": DatasetPreset("sbhar", 50.0, 2.56, 0.5, 6, 3, transition_classes=(6, 7, 8, 9, 10, 11)),
    "opportunity": DatasetPreset("opportunity", 30.0, 3.0, 0.5, 5, 3),
    "realworld": DatasetPreset("realworld", 50.0, 3.0, 0.5, 8, 3),
}


@dataclass(frozen=True)
class SyntheticSpec:
    """Cross-user synthetic task: per-class sinusoids, per-user affine
    distortion, and a fraction of target windows replaced by two-class
    temporal mixtures (transition-like corruption)."""

    num_classes: int = 3
    source_users: int = 4
    target_users: int = 1
    windows_per_user: int = 100
    n_channels: int = 3
    window_len: int = 32
    base_cycles: float = 1.0
    cycles_step: float = 1.5
    base_amplitude: float = 1.0
    amplitude_step: float = -0.12
    scale_range: tuple = (0.7, 1.3)
    offset_range: tuple = (-0.3, 0.3)
    noise_level: float = 0.25
    corruption: float = 0.2
    seed: int = 7

    def __post_init__(self):
        if self.num_classes < 2:
            raise DataError("at least two classes required")
        if not 0.0 <= self.corruption <= 1.0:
            raise DataError("corruption fraction must lie in [0, 1]")


# ---------------------------------------------------------------------------
# cleaning and normalization

def clean_and_interpolate(recording):
    """Fill missing values channel-wise by linear interpolation, extending
    the nearest valid value over leading/trailing gaps."""
    channels = recording.channels.copy()
    for c in range(channels.shape[0]):
        row = channels[c]
        valid = np.isfinite(row)
        if not valid.any():
            raise DataError(f"channel {c} of user {recording.user_id!r} has no valid values")
        if not valid.all():
            idx = np.arange(row.shape[0])
            row[~valid] = np.interp(idx[~valid], idx[valid], row[valid])
    return replace_channels(recording, channels)


def replace_channels(recording, channels):
    return RawRecording(recording.user_id, channels, recording.labels, recording.rate)


@dataclass(frozen=True)
class NormalizationStats:
    minima: np.ndarray
    maxima: np.ndarray


def compute_normalization(recordings):
    """Per-channel global min/max over every recording in the experiment."""
    if not recordings:
        raise DataError("no recordings to normalize")
    stack_min = np.min([r.channels.min(axis=1) for r in recordings], axis=0)
    stack_max = np.max([r.channels.max(axis=1) for r in recordings], axis=0)
    return NormalizationStats(minima=stack_min, maxima=stack_max)


def apply_normalization(recording, stats, clip_out_of_range=False):
    """Affine map sending each channel's global min to -1 and max to +1;
    constant channels map to 0. With ``clip_out_of_range`` values beyond the
    stats (source-only normalization) are clamped into [-1, 1]."""
    lo = stats.minima[:, None]
    hi = stats.maxima[:, None]
    span = hi - lo
    out = np.zeros_like(recording.channels)
    nonconstant = (span > 0).reshape(-1)
    out[nonconstant] = (2.0 * (recording.channels[nonconstant] - lo[nonconstant])
                        / span[nonconstant]) - 1.0
    if clip_out_of_range:
        out = np.clip(out, -1.0, 1.0)
    return replace_channels(recording, out)


def normalize_recordings(recordings, mode="global", source_users=None):
    """Normalize every recording with shared statistics.

    ``global`` uses all recordings (source and target; unlabeled target
    access is part of the setting); ``source_only`` computes statistics on
    source users only and clips the rest into range.
    """
    if mode == "global":
        stats = compute_normalization(recordings)
        return [apply_normalization(r, stats) for r in recordings], stats
    if mode == "source_only":
        source = [r for r in recordings if r.user_id in set(source_users or ())]
        stats = compute_normalization(source)
        return [apply_normalization(r, stats, clip_out_of_range=True) for r in recordings], stats
    raise DataError(f"unknown normalization mode {mode!r}")


# ---------------------------------------------------------------------------
# segmentation and splits

def segment(recording, window_seconds, overlap, domain=0):
    """Sliding-window segmentation with majority labels.

    Window length is round(seconds * rate); stride is length * (1 - overlap).
    The window label is the most frequent per-timestep label (lowest index on
    ties); windows whose majority is the unlabeled marker are dropped.
    """
    if not 0.0 <= overlap < 1.0:
        raise DataError("overlap fraction must lie in [0, 1)")
    length = int(round(window_seconds * recording.rate))
    n = recording.channels.shape[1]
    if length > n:
        raise DataError(f"recording of {n} samples shorter than one window ({length})")
    stride = max(1, int(round(length * (1.0 - overlap))))
    count = (n - length) // stride + 1
    data, labels, users = [], [], []
    for i in range(count):
        start = i * stride
        seg_labels = recording.labels[start : start + length]
        counts = np.bincount(seg_labels - UNLABELED, minlength=1)
        majority = int(np.argmax(counts)) + UNLABELED
        if majority == UNLABELED:
            continue
        data.append(recording.channels[:, start : start + length])
        labels.append(majority)
        users.append(recording.user_id)
    if data:
        arr = np.stack(data).astype(np.float32)
    else:
        arr = np.zeros((0, recording.channels.shape[0], length), dtype=np.float32)
    return WindowSet(arr, np.asarray(labels, dtype=np.int64), users, domain)


def merge_window_sets(sets, domain):
    sets = [s for s in sets if len(s)]
    if not sets:
        raise DataError("no windows produced")
    return WindowSet(
        data=np.concatenate([s.data for s in sets]),
        labels=np.concatenate([s.labels for s in sets]),
        user_ids=[u for s in sets for u in s.user_ids],
        domain=domain,
    )


def make_splits(n_source, n_target, seed):
    """Seeded uniform splits: source 0.8/0.2 train/validation, target
    ceil-half adaptation / remainder test. Partitions are disjoint and
    exhaustive."""
    if n_source < 2 or n_target < 2:
        raise DataError("need at least two windows per domain to split")
    rng = np.random.default_rng(seed)
    src = rng.permutation(n_source)
    tgt = rng.permutation(n_target)
    cut_s = int(math.floor(0.8 * n_source))
    cut_t = int(math.ceil(0.5 * n_target))
    return SplitPlan(
        source_train=np.sort(src[:cut_s]),
        source_val=np.sort(src[cut_s:]),
        target_adapt=np.sort(tgt[:cut_t]),
        target_test=np.sort(tgt[cut_t:]),
        seed=seed,
    )


def filter_transition_classes(windows, keep_transitions, transition_classes):
    """Class-filter stage for transition-heavy protocols: transition-class
    windows survive only where ``keep_transitions`` is set."""
    if keep_transitions or not transition_classes:
        return windows
    keep = ~np.isin(windows.labels, np.asarray(transition_classes))
    return windows.subset(np.nonzero(keep)[0])


# ---------------------------------------------------------------------------
# synthetic task

def _class_wave(spec, label, times, phase):
    cycles = spec.base_cycles + spec.cycles_step * label
    amplitude = spec.base_amplitude + spec.amplitude_step * label
    return amplitude * np.sin(2.0 * math.pi * cycles * times + phase)


def _user_windows(spec, rng, user_labels, scales, offsets):
    times = np.arange(spec.window_len) / spec.window_len
    phases = 2.0 * math.pi * np.arange(spec.n_channels) / spec.n_channels
    out = np.empty((len(user_labels), spec.n_channels, spec.window_len), dtype=np.float64)
    for i, label in enumerate(user_labels):
        for c in range(spec.n_channels):
            clean = _class_wave(spec, label, times, phases[c])
            noise = rng.normal(0.0, spec.noise_level, size=spec.window_len)
            out[i, c] = scales[c] * (clean + noise) + offsets[c]
    return out


def generate_synthetic(spec):
    """Seeded synthetic source/target window sets.

    Each class is a sinusoid with class-specific frequency and amplitude;
    each user applies an independent per-channel affine distortion; a
    ``corruption`` fraction of target windows becomes half-and-half temporal
    concatenations of two distinct classes, labeled by the first. Output is
    normalized per channel to [-1, 1] with global statistics.
    """
    rng = np.random.default_rng(spec.seed)
    domains = []
    for domain, n_users, prefix in ((0, spec.source_users, "s"), (1, spec.target_users, "t")):
        blocks, labels, users = [], [], []
        for u in range(n_users):
            user_labels = np.array(
                [k % spec.num_classes for k in range(spec.windows_per_user)], dtype=np.int64
            )
            rng.shuffle(user_labels)
            scales = rng.uniform(*spec.scale_range, size=spec.n_channels)
            offsets = rng.uniform(*spec.offset_range, size=spec.n_channels)
            data = _user_windows(spec, rng, user_labels, scales, offsets)
            if domain == 1 and spec.corruption > 0:
                n_mix = int(round(spec.corruption * len(user_labels)))
                mix_idx = rng.choice(len(user_labels), size=n_mix, replace=False)
                half = spec.window_len // 2
                times = np.arange(spec.window_len) / spec.window_len
                phases = 2.0 * math.pi * np.arange(spec.n_channels) / spec.n_channels
                for i in mix_idx:
                    first = user_labels[i]
                    second = int((first + 1 + rng.integers(spec.num_classes - 1)) % spec.num_classes)
                    for c in range(spec.n_channels):
                        tail = _class_wave(spec, second, times, phases[c])
                        tail = scales[c] * (tail + rng.normal(0.0, spec.noise_level, spec.window_len)) + offsets[c]
                        data[i, c, half:] = tail[half:]
            blocks.append(data)
            labels.append(user_labels)
            users.extend([f"{prefix}{u}"] * len(user_labels))
        domains.append(WindowSet(
            data=np.concatenate(blocks).astype(np.float32),
            labels=np.concatenate(labels),
            user_ids=users,
            domain=domain,
        ))
    source, target = domains
    lo = np.minimum(source.data.min(axis=(0, 2)), target.data.min(axis=(0, 2)))
    hi = np.maximum(source.data.max(axis=(0, 2)), target.data.max(axis=(0, 2)))
    span = np.where(hi > lo, hi - lo, 1.0)[None, :, None]
    base = lo[None, :, None]
    for ws in (source, target):
        scaled = (2.0 * (ws.data.astype(np.float64) - base) / span) - 1.0
        constant = (hi == lo)
        if constant.any():
            scaled[:, constant, :] = 0.0
        ws.data = scaled.astype(np.float32)
    return source, target


# ---------------------------------------------------------------------------
# CSV ingestion

def load_csv(path, n_channels, num_classes, rate_hz):
    """Load per-user recordings from the ingestion CSV contract.

    Header: user_id, timestamp, ch_1..ch_C, label. Rows are grouped by user
    and time-sorted within each user; empty channel fields mark missing
    values; label is a class index or -1. Timestamp gaps wider than twice the
    nominal period split a user's stream into separate recordings.
    """
    expected = ["user_id", "timestamp"] + [f"ch_{i}" for i in range(1, n_channels + 1)] + ["label"]
    recordings = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty CSV file") from None
        if [h.strip() for h in header] != expected:
            raise DataError(f"malformed header: expected {expected}, got {header}")
        current_user = None
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise DataError(f"line {line_no}: expected {len(expected)} fields")
            user = row[0]
            if current_user is not None and user != current_user:
                recordings.extend(_rows_to_recordings(current_user, rows, rate_hz, num_classes))
                rows = []
            current_user = user
            rows.append((line_no, row))
        if current_user is not None:
            recordings.extend(_rows_to_recordings(current_user, rows, rate_hz, num_classes))
    if not recordings:
        raise DataError("CSV contains no data rows")
    return recordings


def _rows_to_recordings(user, rows, rate_hz, num_classes):
    times = np.array([float(row[1]) for _, row in rows])
    if np.any(np.diff(times) < 0):
        raise DataError(f"non-monotonic timestamps for user {user!r}")
    n_channels = len(rows[0][1]) - 3
    channels = np.full((n_channels, len(rows)), np.nan)
    labels = np.empty(len(rows), dtype=np.int64)
    for i, (line_no, row) in enumerate(rows):
        for c in range(n_channels):
            cell = row[2 + c].strip()
            if cell:
                channels[c, i] = float(cell)
        label = int(row[-1])
        if label >= num_classes:
            raise DataError(f"line {line_no}: class index {label} out of range (< {num_classes})")
        labels[i] = label
    period = 1.0 / rate_hz
    gaps = np.nonzero(np.diff(times) > 2.0 * period)[0]
    bounds = [0, *list(gaps + 1), len(rows)]
    out = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        if b > a:
            out.append(RawRecording(user, channels[:, a:b], labels[a:b], rate_hz))
    return out


# ---------------------------------------------------------------------------
# windowed-dataset cache

CACHE_VERSION = 1


def save_windows(path, window_sets, preset_name="custom", num_classes=None,
                 norm_stats=None):
    """Write the windowed-dataset cache: a JSON manifest next to a raw
    little-endian float32 payload holding each set's window data in manifest
    order. Round-trips are bit-exact."""
    window_sets = list(window_sets)
    if num_classes is None:
        num_classes = int(max(ws.labels.max() for ws in window_sets if len(ws)) + 1)
    manifest = {
        "version": CACHE_VERSION,
        "preset": preset_name,
        "num_classes": int(num_classes),
        "normalization": None if norm_stats is None else {
            "minima": [float(v) for v in norm_stats.minima],
            "maxima": [float(v) for v in norm_stats.maxima],
        },
        "domains": [],
    }
    payload = bytearray()
    for ws in window_sets:
        arr = np.ascontiguousarray(ws.data, dtype="<f4")
        manifest["domains"].append({
            "domain": ws.domain,
            "shape": list(arr.shape),
            "labels": [int(v) for v in ws.labels],
            "user_ids": list(ws.user_ids),
        })
        payload.extend(arr.tobytes())
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    with open(str(path) + ".bin", "wb") as fh:
        fh.write(bytes(payload))


def load_windows(path):
    """Read a windowed-dataset cache back into its window sets."""
    with open(str(path) + ".json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != CACHE_VERSION:
        raise DataError(f"cache version mismatch: {manifest.get('version')} != {CACHE_VERSION}")
    with open(str(path) + ".bin", "rb") as fh:
        raw = fh.read()
    sets = []
    offset = 0
    for entry in manifest["domains"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) * 4
        if offset + count > len(raw):
            raise DataError("truncated cache payload")
        arr = np.frombuffer(raw[offset : offset + count], dtype="<f4").reshape(shape).copy()
        offset += count
        sets.append(WindowSet(
            data=arr,
            labels=np.asarray(entry["labels"], dtype=np.int64),
            user_ids=list(entry["user_ids"]),
            domain=int(entry["domain"]),
        ))
    if offset != len(raw):
        raise DataError("cache payload size mismatch")
    return sets, manifest
