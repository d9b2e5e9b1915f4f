"""The four subnetworks: feature extractor, classifier, domain discriminator,
and weight allocator, plus the gradient-reversal coupling between extractor
and discriminator.

Builders produce graph nodes from a name->node parameter mapping, so the same
code serves live placeholders (normal forwards, finite-difference oracles) and
computed nodes (the simulated-step parameters of the meta update).
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import evaluate, graph as g

PROB_LO = g.PROB_EPS
PROB_HI = 1.0 - g.PROB_EPS

BN_AXES = (0, 2)


@dataclass(frozen=True)
class ArchitectureSpec:
    """Layer sizes and input geometry for one experiment.

    The defaults are the standard CNN construction used throughout: three
    same-padded 1-D conv blocks (stride 2 in the first two), batch norm and
    relu after each, global average pooling; a single dense softmax
    classifier; a 500/500 relu MLP discriminator with sigmoid output; and a
    one-hidden-layer allocator mapping per-sample losses to a weight in (0,1).
    """

    in_channels: int
    window_len: int
    num_classes: int
    conv_filters: tuple = (128, 256, 128)
    conv_kernels: tuple = (8, 5, 3)
    conv_strides: tuple = (2, 2, 1)
    disc_hidden: tuple = (500, 500)
    allocator_hidden: int = 5
    allocator_inputs: int = 2  # 2 = (cls loss, domain loss); 1 = single-column ablations; 0 = none
    grl_coefficient: float = 1.0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if not (len(self.conv_filters) == len(self.conv_kernels) == len(self.conv_strides)):
            raise ValueError("conv layer descriptors must have equal lengths")
        if self.window_len < max(self.conv_kernels):
            raise ValueError(
                f"window length {self.window_len} shorter than largest kernel {max(self.conv_kernels)}"
            )
        if self.allocator_inputs not in (0, 1, 2):
            raise ValueError("allocator_inputs must be 0, 1 or 2")

    @property
    def feature_dim(self):
        return self.conv_filters[-1]

    def with_allocator_inputs(self, n):
        return replace(self, allocator_inputs=n)


@dataclass
class NetworkBundle:
    """Parameters of all subnetworks plus batch-norm running state.

    ``params`` maps dotted names (``f.conv1.w`` ...) to arrays; prefixes
    ``f.``, ``c.``, ``d.``, ``w.`` identify the owning subnetwork.
    ``bn_state`` holds running mean/var per conv block, updated only by the
    training loop.
    """

    arch: ArchitectureSpec
    params: dict
    bn_state: dict
    dtype: np.dtype = field(default=np.dtype(np.float32))

    def group(self, prefix):
        key = prefix + "."
        return {name: value for name, value in self.params.items() if name.startswith(key)}

    def group_names(self, prefix):
        key = prefix + "."
        return [name for name in self.params if name.startswith(key)]

    def copy(self):
        return NetworkBundle(
            arch=self.arch,
            params={k: v.copy() for k, v in self.params.items()},
            bn_state={k: v.copy() for k, v in self.bn_state.items()},
            dtype=self.dtype,
        )


def _uniform_fan_in(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_bundle(arch, seed, dtype=np.float32, include_allocator=None):
    """Initialize all parameters: uniform +-1/sqrt(fan_in) weights, zero
    biases, unit batch-norm scale, zero shift, (0, 1) running statistics."""
    if include_allocator is None:
        include_allocator = arch.allocator_inputs > 0
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    params = {}
    bn_state = {}
    c_prev = arch.in_channels
    for i, (filters, kernel, _) in enumerate(
        zip(arch.conv_filters, arch.conv_kernels, arch.conv_strides), start=1
    ):
        params[f"f.conv{i}.w"] = _uniform_fan_in(rng, (filters, c_prev, kernel), c_prev * kernel, dtype)
        params[f"f.conv{i}.b"] = np.zeros(filters, dtype=dtype)
        params[f"f.bn{i}.gamma"] = np.ones(filters, dtype=dtype)
        params[f"f.bn{i}.beta"] = np.zeros(filters, dtype=dtype)
        bn_state[f"f.bn{i}.mean"] = np.zeros(filters, dtype=dtype)
        bn_state[f"f.bn{i}.var"] = np.ones(filters, dtype=dtype)
        c_prev = filters
    params["c.out.w"] = _uniform_fan_in(rng, (arch.feature_dim, arch.num_classes), arch.feature_dim, dtype)
    params["c.out.b"] = np.zeros(arch.num_classes, dtype=dtype)
    d_prev = arch.feature_dim
    for i, units in enumerate(arch.disc_hidden, start=1):
        params[f"d.h{i}.w"] = _uniform_fan_in(rng, (d_prev, units), d_prev, dtype)
        params[f"d.h{i}.b"] = np.zeros(units, dtype=dtype)
        d_prev = units
    params["d.out.w"] = _uniform_fan_in(rng, (d_prev, 1), d_prev, dtype)
    params["d.out.b"] = np.zeros(1, dtype=dtype)
    if include_allocator:
        params["w.hidden.w"] = _uniform_fan_in(
            rng, (arch.allocator_inputs, arch.allocator_hidden), arch.allocator_inputs, dtype
        )
        params["w.hidden.b"] = np.zeros(arch.allocator_hidden, dtype=dtype)
        params["w.out.w"] = _uniform_fan_in(rng, (arch.allocator_hidden, 1), arch.allocator_hidden, dtype)
        params["w.out.b"] = np.zeros(1, dtype=dtype)
    return NetworkBundle(arch=arch, params=params, bn_state=bn_state, dtype=dtype)


def param_placeholders(bundle, prefixes=("f", "c", "d", "w")):
    """Placeholder nodes for every parameter under the given prefixes."""
    nodes = {}
    for name, value in bundle.params.items():
        if name.split(".", 1)[0] in prefixes:
            nodes[name] = g.placeholder(name, value.shape)
    return nodes


def feature_graph(x, pnodes, arch, mode, bn_state=None, stat_sink=None):
    """Feature extractor: conv blocks + batch norm + relu, then global
    average pooling over time. ``mode`` selects batch ('train') or running
    ('eval') statistics; in train mode the per-layer batch statistics are
    appended to ``stat_sink`` as (layer, mean node, var node) for harvesting.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if x.shape[1] != arch.in_channels:
        raise g.GraphError(f"expected {arch.in_channels} channels, got {x.shape[1]}")
    h = x
    for i, (_, kernel, stride) in enumerate(
        zip(arch.conv_filters, arch.conv_kernels, arch.conv_strides), start=1
    ):
        h = g.conv1d(h, pnodes[f"f.conv{i}.w"], pnodes[f"f.conv{i}.b"], stride=stride)
        gamma = pnodes[f"f.bn{i}.gamma"]
        beta = pnodes[f"f.bn{i}.beta"]
        if mode == "train":
            if stat_sink is not None:
                stat_sink.append((f"f.bn{i}", g.bn_batch_mean(h, BN_AXES), g.bn_batch_var(h, BN_AXES)))
            h = g.batchnorm_train(h, gamma, beta, BN_AXES, eps=arch.bn_eps)
        else:
            h = g.batchnorm_eval(
                h, gamma, beta, bn_state[f"f.bn{i}.mean"], bn_state[f"f.bn{i}.var"],
                BN_AXES, eps=arch.bn_eps,
            )
        h = g.relu(h)
    return g.global_avg_pool(h)


def classifier_logits(features, pnodes):
    return g.affine(features, pnodes["c.out.w"], pnodes["c.out.b"])


def classifier_graph(features, pnodes):
    """Class probabilities: one dense layer + softmax, clipped into the
    guarded probability range."""
    return g.clip(g.softmax(classifier_logits(features, pnodes)), PROB_LO, PROB_HI)


def discriminator_graph(features, pnodes, arch, reversal=None):
    """Domain probability in (0, 1); ``reversal`` optionally applies the
    gradient-reversal coupling (identity forward, -coefficient backward)."""
    h = features
    if reversal is not None:
        h = g.gradient_reversal(h, reversal)
    for i in range(1, len(arch.disc_hidden) + 1):
        h = g.relu(g.affine(h, pnodes[f"d.h{i}.w"], pnodes[f"d.h{i}.b"]))
    return g.clip(g.sigmoid(g.affine(h, pnodes["d.out.w"], pnodes["d.out.b"])), PROB_LO, PROB_HI)


def allocator_graph(loss_columns, pnodes):
    """Weight allocator: per-sample losses -> raw weight eta in (0, 1)."""
    h = g.relu(g.affine(loss_columns, pnodes["w.hidden.w"], pnodes["w.hidden.b"]))
    return g.clip(g.sigmoid(g.affine(h, pnodes["w.out.w"], pnodes["w.out.b"])), PROB_LO, PROB_HI)


# ---------------------------------------------------------------------------
# direct (numpy in / numpy out) forwards

def _live_params(bundle, prefixes):
    nodes = param_placeholders(bundle, prefixes)
    env = {name: bundle.params[name] for name in nodes}
    return nodes, env


def forward_features(batch, bundle, mode="eval"):
    """Evaluate the feature extractor on a (n, channels, length) batch."""
    batch = np.asarray(batch)
    x = g.placeholder("batch", batch.shape)
    pnodes, env = _live_params(bundle, ("f",))
    env["batch"] = batch
    node = feature_graph(x, pnodes, bundle.arch, mode, bn_state=bundle.bn_state)
    return evaluate(node, env, dtype=bundle.dtype)


def forward_class_probs(features, bundle):
    features = np.asarray(features)
    f = g.placeholder("features", features.shape)
    pnodes, env = _live_params(bundle, ("c",))
    env["features"] = features
    return evaluate(classifier_graph(f, pnodes), env, dtype=bundle.dtype)


def forward_domain_prob(features, bundle, reversal=None):
    features = np.asarray(features)
    f = g.placeholder("features", features.shape)
    pnodes, env = _live_params(bundle, ("d",))
    env["features"] = features
    node = discriminator_graph(f, pnodes, bundle.arch, reversal=reversal)
    return evaluate(node, env, dtype=bundle.dtype)


def forward_allocator(loss_pairs, bundle):
    """Raw allocator weights for a (n, allocator_inputs) array of per-sample
    losses; inputs must be non-negative (they are losses)."""
    loss_pairs = np.asarray(loss_pairs)
    if loss_pairs.ndim != 2 or loss_pairs.shape[1] != bundle.arch.allocator_inputs:
        raise ValueError(f"expected (n, {bundle.arch.allocator_inputs}) loss columns, got {loss_pairs.shape}")
    if np.any(loss_pairs < 0):
        raise ValueError("allocator inputs are losses and must be non-negative")
    x = g.placeholder("losses", loss_pairs.shape)
    pnodes, env = _live_params(bundle, ("w",))
    env["losses"] = loss_pairs
    return evaluate(allocator_graph(x, pnodes), env, dtype=bundle.dtype)
