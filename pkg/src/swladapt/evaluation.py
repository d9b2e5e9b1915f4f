"""Performance measures and analysis artifacts: accuracy, macro F1, the
proxy A-distance between feature distributions, paired t-tests across seeds,
the allocator weight-surface export, and convergence traces."""

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as scipy_stats

from .autodiff import evaluate, gradient, graph as g
from .networks import forward_allocator


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    per_class: list  # (precision, recall, f1) per class
    sample_count: int
    new_user: str = ""
    seed: int = 0
    a_distance: float = float("nan")
    validation_accuracy: float = float("nan")
    runtime_seconds: float = 0.0


def accuracy(y_true, y_pred):
    """Fraction of exact matches."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError("prediction/label length mismatch")
    if y_true.size == 0:
        raise ValueError("empty input")
    return float(np.mean(y_true == y_pred))


def per_class_scores(y_true, y_pred, num_classes):
    """Per-class (precision, recall, f1); absent classes score zero."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("empty input")
    if y_true.max(initial=0) >= num_classes or y_pred.max(initial=0) >= num_classes:
        raise ValueError("label outside class range")
    out = []
    for k in range(num_classes):
        tp = int(np.sum((y_pred == k) & (y_true == k)))
        fp = int(np.sum((y_pred == k) & (y_true != k)))
        fn = int(np.sum((y_pred != k) & (y_true == k)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        out.append((precision, recall, f1))
    return out


def macro_f1(y_true, y_pred, num_classes):
    """Unweighted mean of per-class F1; a class absent from both labels and
    predictions contributes zero."""
    scores = per_class_scores(y_true, y_pred, num_classes)
    return float(np.mean([f1 for _, _, f1 in scores]))


def a_distance_from_error(error):
    """d_A = 2 (1 - 2 eps), clamped into [0, 2]."""
    return float(np.clip(2.0 * (1.0 - 2.0 * error), 0.0, 2.0))


def proxy_a_distance(source_features, target_features, seed, hidden=64,
                     steps=200, lr=1e-2):
    """Domain discrepancy via a freshly trained two-layer domain classifier.

    Each domain is split 50/50 into train/held-out halves; a dense-relu-dense
    sigmoid network is trained with full-batch Adam on the train halves, and
    the held-out balanced error eps gives d_A = 2(1 - 2 eps) clamped to
    [0, 2]. Fully seeded and isolated.
    """
    from .training import AdamState, optimizer_step

    source_features = np.asarray(source_features, dtype=np.float64)
    target_features = np.asarray(target_features, dtype=np.float64)
    if len(source_features) < 20 or len(target_features) < 20:
        raise ValueError("need at least 20 feature vectors per domain")
    if source_features.shape[1] != target_features.shape[1]:
        raise ValueError("feature dimensionality mismatch")
    rng = np.random.default_rng(seed)
    halves = {}
    for name, feats in (("s", source_features), ("t", target_features)):
        perm = rng.permutation(len(feats))
        cut = len(feats) // 2
        halves[name] = (feats[perm[:cut]], feats[perm[cut:]])
    x_train = np.concatenate([halves["s"][0], halves["t"][0]])
    y_train = np.concatenate([np.zeros(len(halves["s"][0])), np.ones(len(halves["t"][0]))])
    dim = x_train.shape[1]
    bound1 = 1.0 / np.sqrt(dim)
    bound2 = 1.0 / np.sqrt(hidden)
    params = {
        "w1": rng.uniform(-bound1, bound1, size=(dim, hidden)),
        "b1": np.zeros(hidden),
        "w2": rng.uniform(-bound2, bound2, size=(hidden, 1)),
        "b2": np.zeros(1),
    }
    x_node = g.placeholder("x", x_train.shape)
    pnodes = {name: g.placeholder(name, val.shape) for name, val in params.items()}
    hidden_node = g.relu(g.affine(x_node, pnodes["w1"], pnodes["b1"]))
    prob = g.clip(g.sigmoid(g.affine(hidden_node, pnodes["w2"], pnodes["b2"])), 1e-7, 1 - 1e-7)
    loss = g.reduce_mean(g.binary_cross_entropy(prob, y_train))
    adam = AdamState.for_params(params)
    names = list(params)
    env = dict(params)
    env["x"] = x_train
    for _ in range(steps):
        grads = dict(zip(names, gradient(loss, [pnodes[n] for n in names], env, dtype=np.float64)))
        optimizer_step(params, grads, adam, lr)

    def held_error(feats, label):
        ph = g.placeholder("held", feats.shape)
        hnode = g.relu(g.affine(ph, pnodes["w1"], pnodes["b1"]))
        pnode = g.sigmoid(g.affine(hnode, pnodes["w2"], pnodes["b2"]))
        probs = evaluate(pnode, {**params, "held": feats}, dtype=np.float64)
        pred = (probs.reshape(-1) > 0.5).astype(int)
        return float(np.mean(pred != label))

    eps = 0.5 * (held_error(halves["s"][1], 0) + held_error(halves["t"][1], 1))
    return a_distance_from_error(eps)


def paired_t_test(scores_a, scores_b):
    """Two-sided paired t-test.

    Degenerate zero-variance differences use the documented conventions:
    (t, p) = (0, 1) when the mean difference is zero, otherwise p = 0 with a
    signed infinite statistic.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("score lists must be 1-d and equal length")
    if len(a) < 2:
        raise ValueError("need at least two paired scores")
    diff = a - b
    mean = diff.mean()
    sd = diff.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return float(np.sign(mean) * np.inf), 0.0
    t = mean / (sd / np.sqrt(len(diff)))
    p = 2.0 * float(scipy_stats.t.sf(abs(t), df=len(diff) - 1))
    return float(t), p


@dataclass
class WeightSurfaceGrid:
    cls_losses: np.ndarray
    dom_losses: np.ndarray
    eta: np.ndarray  # (resolution, resolution), rows follow cls axis


def export_weight_surface(bundle, bounds, resolution):
    """Evaluate the allocator on a loss grid.

    ``bounds`` is ((cls_lo, cls_hi), (dom_lo, dom_hi)); grid points are
    evaluated through the ordinary allocator forward, so exported values are
    bit-identical to direct calls.
    """
    if resolution < 1:
        raise ValueError("resolution must be positive")
    (c_lo, c_hi), (d_lo, d_hi) = bounds
    cls_axis = np.linspace(c_lo, c_hi, resolution)
    dom_axis = np.linspace(d_lo, d_hi, resolution)
    grid_c, grid_d = np.meshgrid(cls_axis, dom_axis, indexing="ij")
    pairs = np.stack([grid_c.reshape(-1), grid_d.reshape(-1)], axis=1)
    eta = forward_allocator(pairs.astype(bundle.dtype), bundle).reshape(resolution, resolution)
    return WeightSurfaceGrid(cls_losses=cls_axis, dom_losses=dom_axis, eta=eta)


def write_weight_surface_csv(grid, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["l_c", "l_d", "eta"])
        for i, lc in enumerate(grid.cls_losses):
            for j, ld in enumerate(grid.dom_losses):
                writer.writerow([repr(float(lc)), repr(float(ld)), repr(float(grid.eta[i, j]))])


@dataclass
class ConvergenceTrace:
    """Sampled testing loss plus per-domain weight-change statistics for the
    fixed probe windows; the first record carries no weight deltas."""

    steps: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)
    dw_mean_source: list = field(default_factory=list)
    dw_std_source: list = field(default_factory=list)
    dw_mean_target: list = field(default_factory=list)
    dw_std_target: list = field(default_factory=list)
    probe_counts: tuple = (0, 0)
    _previous: np.ndarray | None = None

    def record(self, step, test_loss, weights, n_source):
        self.steps.append(int(step))
        self.test_loss.append(float(test_loss))
        if self._previous is None:
            for column in (self.dw_mean_source, self.dw_std_source,
                           self.dw_mean_target, self.dw_std_target):
                column.append(float("nan"))
        else:
            delta = np.abs(weights - self._previous)
            src, tgt = delta[:n_source], delta[n_source:]
            self.dw_mean_source.append(float(src.mean()) if src.size else float("nan"))
            self.dw_std_source.append(float(src.std()) if src.size else float("nan"))
            self.dw_mean_target.append(float(tgt.mean()) if tgt.size else float("nan"))
            self.dw_std_target.append(float(tgt.std()) if tgt.size else float("nan"))
        self._previous = np.array(weights, dtype=np.float64)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([
                "step", "test_loss", "dw_mean_source", "dw_std_source",
                "dw_mean_target", "dw_std_target",
            ])
            for row in zip(self.steps, self.test_loss, self.dw_mean_source,
                           self.dw_std_source, self.dw_mean_target, self.dw_std_target):
                writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def write_features_csv(path, features, labels):
    """Export pre-softmax classifier features for external embedding tools."""
    features = np.asarray(features)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"feat_{i}" for i in range(features.shape[1])] + ["label"])
        for row, label in zip(features, labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])
