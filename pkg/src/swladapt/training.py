"""The three-phase training step: classification update, meta update of the
weight allocator through a simulated alignment step, and the adversarial
alignment update.

Each step builds one expression graph per phase. The alignment objective is
constructed through the gradient-reversal coupling, so a single backward pass
yields both the feature-extractor direction (already reversed) used by the
simulated step and the final update, and the discriminator direction. The
simulated parameters stay symbolic functions of the allocator parameters,
which is what lets the meta gradient flow end to end; they are discarded once
the allocator has been stepped.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import evaluate, gradient, gradient_as_nodes, graph as g
from .networks import (
    allocator_graph,
    classifier_graph,
    discriminator_graph,
    feature_graph,
    param_placeholders,
)

METHODS = ("swl-adapt", "dann", "swl-d", "swl-c", "swl-s")


@dataclass(frozen=True)
class Hyperparams:
    """Per-run training knobs; defaults follow the standard configuration."""

    batch_per_domain: int = 128
    total_steps: int = 1000
    allocator_lr: float = 1e-3
    model_lr: float = 1e-3
    confidence: float = 0.7
    zero_guard: float = 1.0
    seed: int = 1
    allocator_update: str = "adam"  # or "sgd" (plain descent, oracle mode)

    def __post_init__(self):
        if self.batch_per_domain < 1 or self.total_steps < 1:
            raise ValueError("batch size and step count must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence threshold must lie in (0, 1)")
        if self.zero_guard <= 0 or self.allocator_lr <= 0 or self.model_lr <= 0:
            raise ValueError("learning rates and zero guard must be positive")
        if self.allocator_update not in ("adam", "sgd"):
            raise ValueError("allocator_update must be 'adam' or 'sgd'")


@dataclass
class PseudoLabels:
    labels: np.ndarray      # argmax class per target sample
    confidence: np.ndarray  # probability of that class
    mask: np.ndarray        # 1 where confidence strictly exceeds the threshold

    @property
    def n_selected(self):
        return int(self.mask.sum())


@dataclass
class SampleWeights:
    eta: np.ndarray
    weights: np.ndarray
    domain_tags: np.ndarray


def cosine_lr(t, total, base_lr):
    """Cosine annealing: base at t=0, half at t=total/2, zero at t=total."""
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / total))


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
        )


def optimizer_step(params, grads, state, lr, direction="descend",
                   beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard Adam with bias correction, in place on ``params``.

    ``ascend`` negates the gradients first, so ascend on g equals descend
    on -g exactly.
    """
    if direction not in ("descend", "ascend"):
        raise ValueError(direction)
    sign = -1.0 if direction == "ascend" else 1.0
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        grad = np.asarray(grads[name], dtype=p.dtype) * p.dtype.type(sign)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        m_hat = m / bc1
        v_hat = v / bc2
        p -= p.dtype.type(lr) * m_hat / (np.sqrt(v_hat) + eps)


def sgd_step(params, grads, lr):
    for name, p in params.items():
        p -= p.dtype.type(lr) * np.asarray(grads[name], dtype=p.dtype)


def assign_pseudo_labels(target_batch, bundle, confidence_threshold,
                         feature_params=None, classifier_params=None):
    """Argmax pseudo-labels from an inference-mode forward pass.

    Selection is strict: mask is 1 only when the top probability exceeds the
    threshold. Ties resolve to the lowest class index. Optional parameter
    overrides support labeling at simulated parameters.
    """
    target_batch = np.asarray(target_batch)
    if target_batch.shape[0] == 0:
        raise ValueError("target batch must be non-empty")
    x = g.placeholder("pl_batch", target_batch.shape)
    pnodes = param_placeholders(bundle, ("f", "c"))
    env = {name: bundle.params[name] for name in pnodes}
    if feature_params:
        env.update(feature_params)
    if classifier_params:
        env.update(classifier_params)
    env["pl_batch"] = target_batch
    feats = feature_graph(x, pnodes, bundle.arch, "eval", bn_state=bundle.bn_state)
    probs = evaluate(classifier_graph(feats, pnodes), env, dtype=bundle.dtype)
    labels = probs.argmax(axis=1)
    confidence = probs[np.arange(len(labels)), labels]
    mask = (confidence > confidence_threshold).astype(np.int64)
    return PseudoLabels(labels=labels, confidence=confidence, mask=mask)


def normalize_weights(eta, domain_tags, zero_guard):
    """Per-domain normalization of raw allocator outputs.

    Within each domain group w_i = eta_i / (sum eta + guard(sum)), where the
    guard equals ``zero_guard`` only when the group sum is exactly zero, so
    an all-zero group yields all-zero weights instead of a division error.
    """
    eta = np.asarray(eta, dtype=np.float64).reshape(-1)
    domain_tags = np.asarray(domain_tags).reshape(-1)
    if eta.shape != domain_tags.shape:
        raise ValueError("eta and domain tags must align")
    if np.any(eta < 0):
        raise ValueError("raw weights must be non-negative")
    weights = np.zeros_like(eta)
    for d in np.unique(domain_tags):
        idx = domain_tags == d
        total = eta[idx].sum()
        denom = total + (zero_guard if total == 0.0 else 0.0)
        weights[idx] = eta[idx] / denom
    return SampleWeights(eta=eta, weights=weights, domain_tags=domain_tags)


def meta_gradient_closed_form(s, per_sample_domain_grads, per_sample_weight_grads,
                              allocator_lr, model_lr, batch_per_domain):
    """Closed-form allocator increment: (alpha*beta / 2b) * sum_j (s . g_j) a_j.

    ``s`` maps feature-extractor parameter names to the meta-loss gradient at
    the simulated parameters; ``per_sample_domain_grads[j]`` maps the same
    names to the j-th sample's domain-loss gradient; and
    ``per_sample_weight_grads[j]`` maps allocator parameter names to the
    gradient of the j-th normalized weight. Serves as an independent oracle
    for the engine's meta step under plain-descent allocator updates.
    """
    if len(per_sample_domain_grads) != len(per_sample_weight_grads):
        raise ValueError("per-sample gradient lists must align")
    factor = allocator_lr * model_lr / (2.0 * batch_per_domain)
    out = None
    for g_j, a_j in zip(per_sample_domain_grads, per_sample_weight_grads):
        if set(g_j) != set(s):
            raise ValueError("domain-gradient keys do not match meta-gradient keys")
        coef = sum(float(np.vdot(s[name], g_j[name])) for name in s)
        if out is None:
            out = {name: np.zeros_like(val, dtype=np.float64) for name, val in a_j.items()}
        for name, val in a_j.items():
            out[name] += coef * np.asarray(val, dtype=np.float64)
    if out is None:
        raise ValueError("at least one sample required")
    return {name: factor * val for name, val in out.items()}


def classification_loss_node(source_ce, target_ce, mask):
    """Two-term classification objective from per-sample CE nodes.

    Mean over source samples plus mean over the mask-selected target samples;
    when nothing is selected the target term is omitted entirely (no 0/0).
    ``target_ce`` may be None only when the mask selects nothing.
    """
    mask = np.asarray(mask, dtype=np.float64)
    loss = g.reduce_mean(source_ce)
    n_sel = int(mask.sum())
    if n_sel > 0:
        selected = g.reduce_sum(g.mul(target_ce, g.constant(mask)))
        loss = g.add(loss, g.scale(selected, 1.0 / n_sel))
    return loss


def meta_loss_node(target_ce, mask):
    """Unnormalized masked sum of target CE (zero node when nothing selected)."""
    mask = np.asarray(mask, dtype=np.float64)
    return g.reduce_sum(g.mul(target_ce, g.constant(mask)))


def alignment_objective_node(weights, domain_losses, n):
    """Mean weighted domain BCE; the negation of the alignment loss.

    Built over the gradient-reversed discriminator path, its feature-extractor
    gradient equals the gradient of the (negative) alignment loss itself.
    """
    return g.scale(g.reduce_sum(g.mul(weights, domain_losses)), 1.0 / n)


def _graph_domain_normalize(eta_flat, b, uniform_target=False):
    """In-graph per-domain weight normalization of a (2b,) eta vector.

    The zero-sum guard branch is unreachable here because allocator outputs
    are clipped strictly positive; the guard lives in
    :func:`normalize_weights`, which handles raw externally supplied values.
    """
    eta_s = g.slice_axis(eta_flat, 0, 0, b)
    eta_t = g.slice_axis(eta_flat, 0, b, 2 * b)
    w_s = g.div(eta_s, g.broadcast_to(g.reshape(g.reduce_sum(eta_s), (1,)), (b,)))
    if uniform_target:
        w_t = g.constant(np.full(b, 1.0 / b))
    else:
        w_t = g.div(eta_t, g.broadcast_to(g.reshape(g.reduce_sum(eta_t), (1,)), (b,)))
    return g.concat([w_s, w_t], axis=0)


class Trainer:
    """Owns one training run: bundle, optimizer states, step counter.

    ``method`` selects the wiring: the full system, the unweighted
    adversarial baseline ('dann', no allocator, no pseudo-labels), the
    single-input allocator ablations ('swl-d', 'swl-c'), or source-only
    weight learning ('swl-s'). ``allocator_mode='constant'`` keeps the full
    three-phase machinery but pins eta to a constant, which must reduce the
    system to the baseline; it exists for equivalence testing.
    """

    def __init__(self, bundle, hyper, method="swl-adapt", allocator_mode="learned",
                 use_pseudo_labels=None):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
        if allocator_mode not in ("learned", "constant"):
            raise ValueError(f"unknown allocator mode {allocator_mode!r}")
        self.bundle = bundle
        self.hyper = hyper
        self.method = method
        self.allocator_mode = allocator_mode
        if use_pseudo_labels is None:
            use_pseudo_labels = method != "dann"
        self.use_pseudo_labels = use_pseudo_labels
        self.t = 0
        self.has_allocator = method != "dann" and allocator_mode == "learned"
        expected_inputs = {"swl-adapt": 2, "swl-s": 2, "swl-d": 1, "swl-c": 1, "dann": 0}[method]
        if self.has_allocator and bundle.arch.allocator_inputs != expected_inputs:
            raise ValueError(
                f"method {method!r} needs allocator_inputs={expected_inputs}, "
                f"bundle has {bundle.arch.allocator_inputs}"
            )
        self.adam_f = AdamState.for_params(bundle.group("f"))
        self.adam_c = AdamState.for_params(bundle.group("c"))
        self.adam_d = AdamState.for_params(bundle.group("d"))
        self.adam_w = AdamState.for_params(bundle.group("w")) if self.has_allocator else None

    # -- learning-rate schedule ------------------------------------------------
    def model_lr(self):
        return cosine_lr(self.t, self.hyper.total_steps, self.hyper.model_lr)

    def allocator_lr(self):
        return cosine_lr(self.t, self.hyper.total_steps, self.hyper.allocator_lr)

    # -- batch-norm running state ----------------------------------------------
    def _commit_bn_stats(self, stat_nodes, values):
        momentum = self.bundle.arch.bn_momentum
        for layer, mean_node, var_node in stat_nodes:
            for suffix, node in (("mean", mean_node), ("var", var_node)):
                running = self.bundle.bn_state[f"{layer}.{suffix}"]
                running *= 1.0 - momentum
                running += momentum * values[node].astype(running.dtype)

    # -- phase (i): classification update ---------------------------------------
    def _classification_update(self, xs, ys, xt, pseudo, lr):
        arch = self.bundle.arch
        dtype = self.bundle.dtype
        pnodes = param_placeholders(self.bundle, ("f", "c"))
        env = {name: self.bundle.params[name] for name in pnodes}
        sink = []
        xs_node = g.placeholder("xs", xs.shape)
        env["xs"] = xs
        feat_s = feature_graph(xs_node, pnodes, arch, "train", stat_sink=sink)
        ce_s = g.cross_entropy(classifier_graph(feat_s, pnodes), ys, arch.num_classes)
        n_sel = pseudo.n_selected if self.use_pseudo_labels else 0
        ce_t = None
        if n_sel > 0:
            xt_node = g.placeholder("xt", xt.shape)
            env["xt"] = xt
            feat_t = feature_graph(xt_node, pnodes, arch, "train", stat_sink=sink)
            ce_t = g.cross_entropy(classifier_graph(feat_t, pnodes), pseudo.labels, arch.num_classes)
        loss = classification_loss_node(ce_s, ce_t, pseudo.mask if n_sel > 0 else np.zeros(len(xt)))
        targets = list(pnodes)
        cache = {}
        stat_nodes = [node for _, m, v in sink for node in (m, v)]
        evaluate([loss] + stat_nodes, env, dtype=dtype, cache=cache)
        grads = dict(zip(targets, gradient(loss, [pnodes[n] for n in targets], env, dtype=dtype, cache=cache)))
        loss_value = float(cache[loss])
        optimizer_step(self.bundle.group("f"), grads, self.adam_f, lr)
        optimizer_step(self.bundle.group("c"), grads, self.adam_c, lr)
        self._commit_bn_stats(sink, cache)
        return loss_value

    # -- phases (ii) and (iii): alignment graph ---------------------------------
    def _build_alignment_graph(self, x_all, ys, pseudo):
        """One combined graph over the 2b-sample batch.

        Returns the reversed alignment objective (mean weighted domain BCE
        through the gradient-reversal coupling), per-sample loss nodes, the
        weight nodes, and the harvested batch-statistic nodes. Gradients of
        the objective w.r.t. feature parameters equal the gradient of the
        weighted alignment loss (the reversal supplies the sign), so the same
        backward nodes drive the simulated step and the final update.
        """
        arch = self.bundle.arch
        b = x_all.shape[0] // 2
        prefixes = ("f", "c", "d", "w") if self.has_allocator else ("f", "c", "d")
        pnodes = param_placeholders(self.bundle, prefixes)
        sink = []
        x_node = g.placeholder("x_all", x_all.shape)
        feats = feature_graph(x_node, pnodes, arch, "train", stat_sink=sink)
        labels_all = np.concatenate([ys, pseudo.labels])
        lc_all = g.cross_entropy(classifier_graph(feats, pnodes), labels_all, arch.num_classes)
        p_dom = discriminator_graph(feats, pnodes, arch, reversal=arch.grl_coefficient)
        domain_tags = np.concatenate([np.zeros(b), np.ones(b)])
        ld_all = g.binary_cross_entropy(p_dom, domain_tags)

        if self.method == "dann" or self.allocator_mode == "constant":
            if self.allocator_mode == "constant":
                # constant raw weight; per-domain normalization makes it 1/b
                eta = g.constant(np.full(2 * b, 0.5))
                w_all = _graph_domain_normalize(eta, b)
            else:
                eta = None
                w_all = g.constant(np.full(2 * b, 1.0 / b))
        else:
            columns = []
            if self.method in ("swl-adapt", "swl-s", "swl-c"):
                columns.append(g.reshape(g.detach(lc_all), (2 * b, 1)))
            if self.method in ("swl-adapt", "swl-s", "swl-d"):
                columns.append(g.reshape(g.detach(ld_all), (2 * b, 1)))
            pair = columns[0] if len(columns) == 1 else g.concat(columns, axis=1)
            eta = g.reshape(allocator_graph(pair, pnodes), (2 * b,))
            w_all = _graph_domain_normalize(eta, b, uniform_target=self.method == "swl-s")

        objective = alignment_objective_node(w_all, ld_all, 2 * b)
        return pnodes, objective, lc_all, ld_all, eta, w_all, sink

    def _allocator_update(self, pnodes, theta_tilde, xt, lr_w, env, cache):
        """Phase (ii) tail: re-label at the simulated parameters, build the
        meta-classification loss there, and step the allocator."""
        arch = self.bundle.arch
        dtype = self.bundle.dtype
        tilde_pnodes = dict(pnodes)
        tilde_pnodes.update(theta_tilde)
        xt_node = g.placeholder("xt_meta", xt.shape)
        env["xt_meta"] = xt
        feats_eval = feature_graph(xt_node, tilde_pnodes, arch, "eval", bn_state=self.bundle.bn_state)
        probs_eval = evaluate(classifier_graph(feats_eval, tilde_pnodes), env, dtype=dtype, cache=cache)
        labels = probs_eval.argmax(axis=1)
        confidence = probs_eval[np.arange(len(labels)), labels]
        mask = (confidence > self.hyper.confidence).astype(np.int64)
        if not self.use_pseudo_labels:
            mask = np.zeros_like(mask)
        w_params = self.bundle.group("w")
        n_sel = int(mask.sum())
        if n_sel == 0:
            zero = {name: np.zeros_like(val) for name, val in w_params.items()}
            if self.hyper.allocator_update == "adam":
                optimizer_step(w_params, zero, self.adam_w, lr_w)
            return 0.0, n_sel
        feats_mc = feature_graph(xt_node, tilde_pnodes, arch, "train")
        ce = g.cross_entropy(classifier_graph(feats_mc, tilde_pnodes), labels, arch.num_classes)
        meta_loss = meta_loss_node(ce, mask)
        meta_value = float(evaluate(meta_loss, env, dtype=dtype, cache=cache))
        names = list(w_params)
        grads = dict(zip(names, gradient(meta_loss, [pnodes[n] for n in names], env, dtype=dtype, cache=cache)))
        if self.hyper.allocator_update == "adam":
            optimizer_step(w_params, grads, self.adam_w, lr_w)
        else:
            sgd_step(w_params, grads, lr_w)
        return meta_value, n_sel

    def meta_gradient_probe(self, xs, ys, xt, pseudo=None):
        """Phase (ii) quantities at the current state, with no mutation.

        Builds the same alignment graph and simulated-step nodes as
        :meth:`step` and returns the allocator gradient of the
        meta-classification loss together with the numeric ingredients an
        independent oracle needs: per-sample classification/domain losses,
        the simulated parameter values, and the re-assigned pseudo-labels.
        """
        if not self.has_allocator:
            raise RuntimeError("probe requires a learned allocator")
        xs = np.asarray(xs, dtype=self.bundle.dtype)
        xt = np.asarray(xt, dtype=self.bundle.dtype)
        b = xs.shape[0]
        lr = self.model_lr()
        dtype = self.bundle.dtype
        if pseudo is None:
            pseudo = assign_pseudo_labels(xt, self.bundle, self.hyper.confidence)
        x_all = np.concatenate([xs, xt], axis=0)
        pnodes, objective, lc_all, ld_all, eta, w_all, _ = self._build_alignment_graph(x_all, ys, pseudo)
        f_names = self.bundle.group_names("f")
        gf_nodes = dict(zip(f_names, gradient_as_nodes(objective, [pnodes[n] for n in f_names])))
        theta_tilde = {name: g.sub(pnodes[name], g.scale(gf_nodes[name], lr)) for name in f_names}
        env = {name: self.bundle.params[name] for name in pnodes}
        env["x_all"] = x_all
        cache = {}
        lc_v, ld_v, eta_v, w_v = evaluate([lc_all, ld_all, eta, w_all], env, dtype=dtype, cache=cache)
        tilde_values = {
            name: evaluate(theta_tilde[name], env, dtype=dtype, cache=cache) for name in f_names
        }
        tilde_pnodes = dict(pnodes)
        tilde_pnodes.update(theta_tilde)
        xt_node = g.placeholder("xt_meta", xt.shape)
        env["xt_meta"] = xt
        feats_eval = feature_graph(xt_node, tilde_pnodes, self.bundle.arch, "eval", bn_state=self.bundle.bn_state)
        probs_eval = evaluate(classifier_graph(feats_eval, tilde_pnodes), env, dtype=dtype, cache=cache)
        labels = probs_eval.argmax(axis=1)
        confidence = probs_eval[np.arange(len(labels)), labels]
        mask = (confidence > self.hyper.confidence).astype(np.int64)
        w_names = self.bundle.group_names("w")
        if mask.sum() == 0:
            grads = {name: np.zeros_like(self.bundle.params[name]) for name in w_names}
            meta_value = 0.0
        else:
            feats_mc = feature_graph(xt_node, tilde_pnodes, self.bundle.arch, "train")
            ce = g.cross_entropy(classifier_graph(feats_mc, tilde_pnodes), labels, self.bundle.arch.num_classes)
            meta_loss = meta_loss_node(ce, mask)
            meta_value = float(evaluate(meta_loss, env, dtype=dtype, cache=cache))
            grads = dict(zip(
                w_names,
                gradient(meta_loss, [pnodes[n] for n in w_names], env, dtype=dtype, cache=cache),
            ))
        return {
            "allocator_grad": grads,
            "meta_loss": meta_value,
            "pseudo": pseudo,
            "meta_labels": labels,
            "meta_mask": mask,
            "cls_losses": lc_v,
            "dom_losses": ld_v,
            "eta": eta_v,
            "weights": w_v,
            "tilde_params": tilde_values,
            "lr": lr,
        }

    def step(self, xs, ys, xt):
        """One full training step; returns the per-step log record."""
        if self.t >= self.hyper.total_steps:
            raise RuntimeError("training already ran for total_steps")
        xs = np.asarray(xs, dtype=self.bundle.dtype)
        xt = np.asarray(xt, dtype=self.bundle.dtype)
        ys = np.asarray(ys)
        b = self.hyper.batch_per_domain
        if xs.shape[0] != b or xt.shape[0] != b:
            raise ValueError(f"expected {b} samples per domain, got {xs.shape[0]}/{xt.shape[0]}")
        lr = self.model_lr()
        lr_w = self.allocator_lr()
        dtype = self.bundle.dtype
        record = {"step": self.t, "lr": lr}

        # phase (i): pseudo-label with current parameters, update f and c
        pseudo = assign_pseudo_labels(xt, self.bundle, self.hyper.confidence)
        if not self.use_pseudo_labels:
            pseudo = PseudoLabels(pseudo.labels, pseudo.confidence, np.zeros_like(pseudo.mask))
        record["n_selected"] = pseudo.n_selected
        record["loss_cls"] = self._classification_update(xs, ys, xt, pseudo, lr)

        # phases (ii)+(iii) share one alignment graph over the combined batch
        x_all = np.concatenate([xs, xt], axis=0)
        pnodes, objective, lc_all, ld_all, eta, w_all, sink = self._build_alignment_graph(x_all, ys, pseudo)
        f_names = self.bundle.group_names("f")
        d_names = self.bundle.group_names("d")
        grad_nodes = gradient_as_nodes(objective, [pnodes[n] for n in f_names + d_names])
        gf_nodes = dict(zip(f_names, grad_nodes[: len(f_names)]))
        gd_nodes = dict(zip(d_names, grad_nodes[len(f_names):]))

        env = {name: self.bundle.params[name] for name in pnodes}
        env["x_all"] = x_all
        cache = {}
        harvest = [objective, lc_all, ld_all] + [n for _, m, v in sink for n in (m, v)]
        evaluate(harvest, env, dtype=dtype, cache=cache)
        self._commit_bn_stats(sink, cache)
        record["loss_wd"] = -float(cache[objective])
        record["max_loss_cls"] = float(cache[lc_all].max())
        record["max_loss_dom"] = float(cache[ld_all].max())

        if self.has_allocator:
            # phase (ii): simulated alignment step, then allocator update
            theta_tilde = {
                name: g.sub(pnodes[name], g.scale(gf_nodes[name], lr)) for name in f_names
            }
            meta_value, meta_selected = self._allocator_update(
                pnodes, theta_tilde, xt, lr_w, env, cache
            )
            record["loss_meta"] = meta_value
            record["meta_selected"] = meta_selected
            eta_values = evaluate(eta, env, dtype=dtype, cache=cache)
            record["eta_mean_source"] = float(eta_values[:b].mean())
            record["eta_mean_target"] = float(eta_values[b:].mean())
            # phase (iii): the allocator params were stepped in place, so a
            # fresh cache re-evaluates the same graph at the new weights
            final_cache = {}
            outs = evaluate(
                [w_all] + [gf_nodes[n] for n in f_names] + [gd_nodes[n] for n in d_names],
                env, dtype=dtype, cache=final_cache,
            )
            w_values = outs[0]
            gf = dict(zip(f_names, outs[1 : 1 + len(f_names)]))
            gd = dict(zip(d_names, outs[1 + len(f_names):]))
        else:
            outs = evaluate(
                [w_all] + [gf_nodes[n] for n in f_names] + [gd_nodes[n] for n in d_names],
                env, dtype=dtype, cache=cache,
            )
            w_values = outs[0]
            gf = dict(zip(f_names, outs[1 : 1 + len(f_names)]))
            gd = dict(zip(d_names, outs[1 + len(f_names):]))

        record["w_sum_source"] = float(w_values[:b].sum())
        record["w_sum_target"] = float(w_values[b:].sum())
        optimizer_step(self.bundle.group("f"), gf, self.adam_f, lr)
        optimizer_step(self.bundle.group("d"), gd, self.adam_d, lr)
        self.t += 1
        return record
