"""Evaluation and reverse-mode differentiation over expression graphs.

``gradient_as_nodes`` builds the backward pass as ordinary graph nodes, so
its outputs can be differentiated again; ``gradient`` is simply
``gradient_as_nodes`` followed by ``evaluate``. Both sweeps prune to the
sub-DAG that actually connects the requested targets to the objective, which
keeps higher-order sweeps away from paths whose primitives refuse further
differentiation (training-mode batch-norm statistics).
"""

import numpy as np

from .graph import (
    FORWARD,
    RAISES_VJP,
    VJP,
    ZERO_VJP,
    GraphError,
    SecondOrderUnsupportedError,
    add,
    constant,
)


class UnboundInputError(KeyError):
    """A placeholder had no value in the bindings."""


class NonFiniteError(ArithmeticError):
    """A primitive produced NaN or Inf."""


class _EvalContext:
    """Binding/dtype services passed to forward rules."""

    __slots__ = ("env", "dtype")

    def __init__(self, env, dtype):
        self.env = env
        self.dtype = np.dtype(dtype)

    def lookup(self, node):
        name = node.attrs["name"]
        try:
            value = self.env[name]
        except KeyError:
            raise UnboundInputError(f"unbound input {name!r}") from None
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != node.shape:
            raise GraphError(f"binding for {name!r} has shape {value.shape}, expected {node.shape}")
        return value

    def cast(self, value):
        return np.asarray(value, dtype=self.dtype)

    def scalar(self, c):
        return self.dtype.type(c)


def topo_order(outputs, stop=None):
    """Parents-first order of every node reachable from ``outputs``.

    ``stop`` is an optional set of nodes treated as leaves (already known
    values); traversal does not descend below them.
    """
    order = []
    seen = set()
    stack = [(node, False) for node in reversed(list(outputs))]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node in seen:
            continue
        seen.add(node)
        stack.append((node, True))
        if stop is None or node not in stop:
            for parent in reversed(node.parents):
                if parent not in seen:
                    stack.append((parent, False))
    return order


def evaluate(outputs, env, dtype=np.float32, cache=None, check_finite=True):
    """Compute the values of ``outputs`` under the given bindings.

    ``outputs`` may be a single node or a sequence. ``cache`` is an optional
    node->value dict reused across consecutive calls with identical bindings;
    it is updated in place. Any non-finite primitive result raises
    :class:`NonFiniteError`.
    """
    single = not isinstance(outputs, (list, tuple))
    nodes = [outputs] if single else list(outputs)
    values = cache if cache is not None else {}
    ctx = _EvalContext(env, dtype)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for node in topo_order(nodes, stop=values.keys() if values else None):
            if node in values:
                continue
            args = [values[p] for p in node.parents]
            out = FORWARD[node.op](node, args, ctx)
            out = np.asarray(out, dtype=ctx.dtype)
            if check_finite and not np.all(np.isfinite(out)):
                raise NonFiniteError(f"non-finite values produced by primitive {node.op!r}")
            values[node] = out
    results = [values[n] for n in nodes]
    return results[0] if single else results


def _carrying_set(scalar, targets):
    """Nodes lying on some path from a target to ``scalar``."""
    order = topo_order([scalar])
    targets = set(targets)
    carrying = set()
    for node in order:  # parents first
        if node in targets or any(p in carrying for p in node.parents):
            carrying.add(node)
    return carrying, order


def gradient_as_nodes(scalar, targets):
    """Build graph nodes for d(scalar)/d(target) for each target.

    ``scalar`` must hold a single element. Targets unreachable from the
    objective yield zero constants. The returned nodes are ordinary graph
    nodes and can be differentiated again.
    """
    targets = list(targets)
    if scalar.size != 1:
        raise GraphError(f"gradient: objective must be scalar, got shape {scalar.shape}")
    carrying, order = _carrying_set(scalar, targets)
    cotangents = {}
    if scalar in carrying:
        cotangents[scalar] = constant(np.ones(scalar.shape))
        for node in reversed(order):
            cot = cotangents.get(node)
            if cot is None or node not in carrying or not node.parents:
                continue
            rule = VJP[node.op]
            if rule is ZERO_VJP:
                continue
            if rule is RAISES_VJP:
                raise SecondOrderUnsupportedError(
                    f"primitive {node.op!r} has no registered derivative "
                    "(second-order path through batch-norm statistics)"
                )
            for idx, grad in rule(node, cot):
                parent = node.parents[idx]
                if parent not in carrying:
                    continue
                if grad.shape != parent.shape:
                    raise GraphError(
                        f"VJP of {node.op!r} produced shape {grad.shape} for parent shape {parent.shape}"
                    )
                prev = cotangents.get(parent)
                cotangents[parent] = grad if prev is None else add(prev, grad)
    return [cotangents.get(t, constant(np.zeros(t.shape))) for t in targets]


def gradient(scalar, targets, env, dtype=np.float64, cache=None):
    """Evaluate d(scalar)/d(target) for each target under ``env``.

    Returns a list of arrays aligned with ``targets``. The forward values are
    computed (or reused from ``cache``) in the same pass.
    """
    nodes = gradient_as_nodes(scalar, targets)
    return evaluate(nodes, env, dtype=dtype, cache=cache)
