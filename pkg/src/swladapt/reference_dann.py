"""A direct, unweighted adversarial adaptation trainer.

Written as a plain two-stage DANN step (cross-entropy update, then an
adversarial domain update through the gradient-reversal coupling) with none
of the weighting or meta machinery. It serves as the independent reference
trajectory that the full system must reproduce when its allocator is pinned
to a constant: with ``domain_loss_scale = 1/b`` the per-domain weight
normalization of the full system collapses to exactly this objective.
"""

import numpy as np

from .autodiff import evaluate, gradient, graph as g
from .networks import classifier_graph, discriminator_graph, feature_graph, param_placeholders
from .training import AdamState, cosine_lr, optimizer_step


class DannReference:
    def __init__(self, bundle, hyper, domain_loss_scale=1.0):
        self.bundle = bundle
        self.hyper = hyper
        self.domain_loss_scale = float(domain_loss_scale)
        self.t = 0
        self.adam_f = AdamState.for_params(bundle.group("f"))
        self.adam_c = AdamState.for_params(bundle.group("c"))
        self.adam_d = AdamState.for_params(bundle.group("d"))

    def _commit(self, sink, values):
        momentum = self.bundle.arch.bn_momentum
        for layer, mean_node, var_node in sink:
            for suffix, node in (("mean", mean_node), ("var", var_node)):
                running = self.bundle.bn_state[f"{layer}.{suffix}"]
                running *= 1.0 - momentum
                running += momentum * values[node].astype(running.dtype)

    def step(self, xs, ys, xt):
        arch = self.bundle.arch
        dtype = self.bundle.dtype
        lr = cosine_lr(self.t, self.hyper.total_steps, self.hyper.model_lr)
        xs = np.asarray(xs, dtype=dtype)
        xt = np.asarray(xt, dtype=dtype)

        # source cross-entropy update of extractor and classifier
        pnodes = param_placeholders(self.bundle, ("f", "c"))
        env = {name: self.bundle.params[name] for name in pnodes}
        sink = []
        x_node = g.placeholder("xs", xs.shape)
        env["xs"] = xs
        feats = feature_graph(x_node, pnodes, arch, "train", stat_sink=sink)
        ce = g.cross_entropy(classifier_graph(feats, pnodes), ys, arch.num_classes)
        loss = g.reduce_mean(ce)
        cache = {}
        evaluate([loss] + [n for _, m, v in sink for n in (m, v)], env, dtype=dtype, cache=cache)
        names = list(pnodes)
        grads = dict(zip(names, gradient(loss, [pnodes[n] for n in names], env, dtype=dtype, cache=cache)))
        ce_value = float(cache[loss])
        optimizer_step(self.bundle.group("f"), grads, self.adam_f, lr)
        optimizer_step(self.bundle.group("c"), grads, self.adam_c, lr)
        self._commit(sink, cache)

        # adversarial domain update on the combined batch
        x_all = np.concatenate([xs, xt], axis=0)
        n = x_all.shape[0]
        pnodes = param_placeholders(self.bundle, ("f", "d"))
        env = {name: self.bundle.params[name] for name in pnodes}
        sink = []
        x_node = g.placeholder("x_all", x_all.shape)
        env["x_all"] = x_all
        feats = feature_graph(x_node, pnodes, arch, "train", stat_sink=sink)
        p_dom = discriminator_graph(feats, pnodes, arch, reversal=arch.grl_coefficient)
        domain_tags = np.concatenate([np.zeros(len(xs)), np.ones(len(xt))])
        bce = g.binary_cross_entropy(p_dom, domain_tags)
        objective = g.scale(g.reduce_mean(bce), self.domain_loss_scale)
        cache = {}
        evaluate([objective] + [node for _, m, v in sink for node in (m, v)], env, dtype=dtype, cache=cache)
        names = list(pnodes)
        grads = dict(zip(names, gradient(objective, [pnodes[nm] for nm in names], env, dtype=dtype, cache=cache)))
        optimizer_step(self.bundle.group("f"), grads, self.adam_f, lr)
        optimizer_step(self.bundle.group("d"), grads, self.adam_d, lr)
        self._commit(sink, cache)

        self.t += 1
        return {"step": self.t - 1, "lr": lr, "loss_cls": ce_value,
                "loss_domain": float(cache[objective]) / self.domain_loss_scale}
