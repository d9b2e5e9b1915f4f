"""Shared oracle utilities: central finite differences and comparisons."""

import numpy as np

from swladapt.autodiff import evaluate

FD_STEP = 1e-5


def fd_gradient(scalar_fn, env, name, step=FD_STEP):
    """Central finite differences of ``scalar_fn(env)`` w.r.t. ``env[name]``."""
    base = np.array(env[name], dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = scalar_fn({**env, name: base})
        flat[i] = orig - step
        lo = scalar_fn({**env, name: base})
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def graph_scalar_fn(node):
    """Wrap a scalar graph node as env -> float in 64-bit mode."""

    def fn(env):
        return float(np.asarray(evaluate(node, env, dtype=np.float64)).reshape(()))

    return fn


def assert_close(actual, desired, rtol, atol=1e-8, context=""):
    actual = np.asarray(actual, dtype=np.float64)
    desired = np.asarray(desired, dtype=np.float64)
    assert actual.shape == desired.shape, f"shape {actual.shape} vs {desired.shape} {context}"
    err = np.abs(actual - desired)
    bound = atol + rtol * np.abs(desired)
    worst = np.max(err - bound) if err.size else 0.0
    assert np.all(err <= bound), (
        f"mismatch{' ' + context if context else ''}: worst excess {worst:.3e}, "
        f"max abs err {err.max():.3e}, rtol {rtol}, atol {atol}"
    )


def relative_match(actual, desired, rtol, atol=1e-8):
    actual = np.asarray(actual, dtype=np.float64)
    desired = np.asarray(desired, dtype=np.float64)
    return np.all(np.abs(actual - desired) <= atol + rtol * np.abs(desired))
